"""Local kernels g, h and global kernels G, H, plus the kernel order.

Local kernels are exact finite sums over the jump atoms.  Global kernels
are integrated in closed form when both paths are piecewise constant and
by nested Gauss-Legendre quadrature (with exact inner antiderivatives on
step paths) when a path is smooth, e.g. the optimal consumption.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .errors import DomainError, ValidationError
from .market import LevyTriplet, TimeGrid, UtilitySpec, mix_triplets
from .paths import FunctionPath, StepPath, TimePath, as_path, gauss_legendre, refine_edges, union_edges

FloatArray = NDArray[np.float64]


def q_of(t, T: float):
    """q_t = 1/(T - t + 1)."""
    return 1.0 / (T - np.asarray(t, dtype=float) + 1.0)


def phi1(x):
    """expm1(x)/x with value 1 at 0."""
    x = np.asarray(x, dtype=float)
    small = np.abs(x) < 1e-8
    safe = np.where(small, 1.0, x)
    return np.where(small, 1.0 + 0.5 * x + x * x / 6.0, np.expm1(safe) / safe)


def psi(x):
    """-expm1(-x)/x with value 1 at 0."""
    return phi1(-np.asarray(x, dtype=float))


# ---------------------------------------------------------------------------
# local kernels


def _points(x: ArrayLike, d: int) -> tuple[FloatArray, bool]:
    x = np.asarray(x, dtype=float)
    single = x.ndim <= 1 and x.size == d
    return x.reshape(-1, d), single


def _crra_jump_term(s: FloatArray, p: float) -> FloatArray:
    if np.any(s <= -1.0):
        raise DomainError("1 + x.z <= 0 at some atom: position outside the admissible region")
    l1p = np.log1p(s)
    if p == 0.0:
        return l1p - s
    return np.expm1(p * l1p) / p - s


def local_kernel_crra(x: ArrayLike, theta: LevyTriplet, p: float):
    """g(x) = x.b - (1-p)/2 x'Sigma x + sum_i w_i (U(1 + x.z_i) - U(1) - x.z_i).

    ``x`` may be a single position of shape (d,) or a batch (k, d).
    """
    X, single = _points(x, theta.dim)
    val = X @ theta.drift - 0.5 * (1.0 - p) * np.einsum("ki,ij,kj->k", X, theta.covariance, X)
    F = theta.jumps
    if F.n_atoms:
        val = val + _crra_jump_term(X @ F.locations.T, p) @ F.intensities
    return float(val[0]) if single else val


def local_kernel_crra_grad(x: ArrayLike, theta: LevyTriplet, p: float) -> FloatArray:
    x = np.asarray(x, dtype=float).reshape(-1)
    grad = theta.drift - (1.0 - p) * theta.covariance @ x
    F = theta.jumps
    if F.n_atoms:
        y = 1.0 + F.locations @ x
        if np.any(y <= 0):
            raise DomainError("1 + x.z <= 0 at some atom")
        grad = grad + F.locations.T @ (F.intensities * (y ** (p - 1.0) - 1.0))
    return grad


def local_kernel_crra_hess(x: ArrayLike, theta: LevyTriplet, p: float) -> FloatArray:
    x = np.asarray(x, dtype=float).reshape(-1)
    H = -(1.0 - p) * theta.covariance
    F = theta.jumps
    if F.n_atoms:
        y = 1.0 + F.locations @ x
        coef = F.intensities * (p - 1.0) * y ** (p - 2.0)
        H = H + (F.locations.T * coef) @ F.locations
    return H


def _cara_jump_term(s: FloatArray, alpha: float) -> FloatArray:
    return -np.expm1(-alpha * s) / alpha - s


def local_kernel_cara(x: ArrayLike, theta: LevyTriplet, q: float, a: float):
    """h(x) = x.b - (a q/2) x'Sigma x + sum_i w_i (e^{-a q x.z_i}/(-a q) + 1/(a q) - x.z_i)."""
    if not (0.0 < q <= 1.0) or not a > 0:
        raise ValidationError("need q in (0, 1] and a > 0")
    X, single = _points(x, theta.dim)
    alpha = a * q
    val = X @ theta.drift - 0.5 * alpha * np.einsum("ki,ij,kj->k", X, theta.covariance, X)
    F = theta.jumps
    if F.n_atoms:
        val = val + _cara_jump_term(X @ F.locations.T, alpha) @ F.intensities
    return float(val[0]) if single else val


def local_kernel_cara_grad(x: ArrayLike, theta: LevyTriplet, q: float, a: float) -> FloatArray:
    x = np.asarray(x, dtype=float).reshape(-1)
    alpha = a * q
    grad = theta.drift - alpha * theta.covariance @ x
    F = theta.jumps
    if F.n_atoms:
        grad = grad + F.locations.T @ (F.intensities * np.expm1(-alpha * (F.locations @ x)))
    return grad


def local_kernel_cara_hess(x: ArrayLike, theta: LevyTriplet, q: float, a: float) -> FloatArray:
    x = np.asarray(x, dtype=float).reshape(-1)
    alpha = a * q
    H = -alpha * theta.covariance
    F = theta.jumps
    if F.n_atoms:
        coef = -alpha * F.intensities * np.exp(-alpha * (F.locations @ x))
        H = H + (F.locations.T * coef) @ F.locations
    return H


def cara_kernel_in_time(x: ArrayLike, theta: LevyTriplet, a: float, T: float, t):
    """h_t(x) for a fixed position and triplet as t varies (q_t enters the kernel)."""
    x = np.asarray(x, dtype=float).reshape(-1)
    t = np.asarray(t, dtype=float)
    alpha = a * q_of(t, T)
    val = x @ theta.drift - 0.5 * alpha * float(x @ theta.covariance @ x)
    F = theta.jumps
    if F.n_atoms:
        s = F.locations @ x
        jt = -np.expm1(-alpha[..., None] * s) / alpha[..., None] - s
        val = val + jt @ F.intensities
    return val


# ---------------------------------------------------------------------------
# paths of policies and triplets


@dataclass(frozen=True, eq=False)
class TripletPath:
    """One triplet per grid cell, optionally with the hull weights that certify membership."""

    triplets: tuple[LevyTriplet, ...]
    weights: tuple[FloatArray, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "triplets", tuple(self.triplets))
        if self.weights is not None:
            if len(self.weights) != len(self.triplets):
                raise ValidationError("one weight vector per cell is required")
            object.__setattr__(self, "weights", tuple(np.asarray(w, float) for w in self.weights))

    @classmethod
    def constant(cls, theta: LevyTriplet, n_cells: int):
        return cls((theta,) * n_cells)

    @classmethod
    def from_weights(cls, grid: TimeGrid, sets, weights: Sequence[ArrayLike]):
        seg = grid.cell_segment
        trips = tuple(mix_triplets(sets[s].vertices, w) for s, w in zip(seg, weights))
        return cls(trips, tuple(np.asarray(w, float) for w in weights))

    def __len__(self):
        return len(self.triplets)

    def __getitem__(self, k) -> LevyTriplet:
        return self.triplets[k]

    def check_membership(self, grid: TimeGrid, sets, tol: float = 1e-10) -> bool:
        """True when every stored weight vector reproduces its cell's triplet."""
        if self.weights is None:
            return False
        for k, (s, w) in enumerate(zip(grid.cell_segment, self.weights)):
            mixed = mix_triplets(sets[s].vertices, w)
            th = self.triplets[k]
            if not (
                np.allclose(mixed.drift, th.drift, atol=tol)
                and np.allclose(mixed.covariance, th.covariance, atol=tol)
            ):
                return False
        return True


@dataclass(frozen=True, eq=False)
class PolicyPath:
    """Investment (ratio pi for CRRA, amount Pi for CARA) per cell plus consumption path.

    ``consumption`` is c (CRRA) or the excess consumption D (CARA); it may be
    an array of cell values, a scalar, a callable of t or a TimePath.
    """

    kind: str
    invest: FloatArray
    consumption: TimePath
    edges: FloatArray = field(repr=False, default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if self.kind not in ("crra", "cara"):
            raise ValidationError("policy kind must be 'crra' or 'cara'")
        inv = np.asarray(self.invest, dtype=float)
        if inv.ndim == 1:
            inv = inv.reshape(-1, 1)
        edges = np.asarray(self.edges, dtype=float)
        if inv.shape[0] != edges.size - 1:
            raise ValidationError("one investment vector per grid cell is required")
        cons = as_path(self.consumption, edges)
        if self.kind == "crra":
            vals = cons.values if isinstance(cons, StepPath) else cons.sample(4)[1]
            if np.any(vals < 0):
                raise ValidationError("CRRA consumption must be nonnegative")
        object.__setattr__(self, "invest", inv)
        object.__setattr__(self, "consumption", cons)
        object.__setattr__(self, "edges", edges)

    @classmethod
    def on_grid(cls, kind: str, grid: TimeGrid, invest, consumption):
        """Broadcast investment to the grid: a scalar or one vector for every cell,
        or (for d = 1) one scalar per cell."""
        inv = np.asarray(invest, dtype=float)
        n = grid.n_cells
        if inv.ndim == 0:
            inv = np.full((n, 1), float(inv))
        elif inv.ndim == 1 and inv.size == n:
            inv = inv.reshape(n, 1)
        elif inv.ndim == 1:
            inv = np.tile(inv, (n, 1))
        return cls(kind, inv, consumption, grid.edges)

    @property
    def n_cells(self) -> int:
        return self.invest.shape[0]

    def with_consumption(self, consumption) -> "PolicyPath":
        return PolicyPath(self.kind, self.invest, consumption, self.edges)

    def with_invest(self, invest) -> "PolicyPath":
        return PolicyPath(self.kind, invest, self.consumption, self.edges)


# ---------------------------------------------------------------------------
# kernel paths


def crra_kernel_path(policy: PolicyPath, theta: TripletPath, p: float) -> StepPath:
    """g_t(pi_t) cell by cell."""
    if len(theta) != policy.n_cells:
        raise ValidationError("triplet path and policy have different cell counts")
    vals = [local_kernel_crra(policy.invest[k], theta[k], p) for k in range(policy.n_cells)]
    return StepPath(policy.edges, vals)


def cara_kernel_path(policy: PolicyPath, theta: TripletPath, a: float) -> FunctionPath:
    """h_t(Pi_t), continuous in t inside each cell through q_t."""
    if len(theta) != policy.n_cells:
        raise ValidationError("triplet path and policy have different cell counts")
    edges = policy.edges
    T = float(edges[-1])
    inv = policy.invest
    trips = theta.triplets

    def h(t):
        t = np.asarray(t, dtype=float)
        j = np.clip(np.searchsorted(edges, t, side="right") - 1, 0, edges.size - 2)
        out = np.empty(t.shape)
        for k in np.unique(j):
            m = j == k
            out[m] = cara_kernel_in_time(inv[k], trips[k], a, T, t[m])
        return out

    return FunctionPath(edges, h)


# ---------------------------------------------------------------------------
# global kernels


def _crra_utility(c, p: float):
    c = np.asarray(c, dtype=float)
    if p == 0.0:
        with np.errstate(divide="ignore"):
            return np.log(c)
    with np.errstate(divide="ignore"):
        return c**p / p


def crra_global_value(g: TimePath, c: TimePath, p: float) -> float:
    """G for kernel path g and consumption path c (Definition of the global kernel)."""
    if g.is_step and c.is_step:
        edges = union_edges(g, c)
        g, c = g.on(edges), c.on(edges)
        L = np.diff(edges)
        r = g.values - c.values
        U = _crra_utility(c.values, p)
        I0 = np.concatenate([[0.0], np.cumsum(r * L)])[:-1]
        if p == 0.0:
            cells = L * (I0 + r + U) + 0.5 * r * L * L
        else:
            cells = np.exp(p * I0) * (r + U) * L * phi1(p * r * L)
        return float(np.sum(cells))
    edges = refine_edges(union_edges(g, c))
    xi, wi = gauss_legendre()
    a, b = edges[:-1], edges[1:]
    L = b - a
    t = a[:, None] + L[:, None] * xi[None, :]
    inner = g.antiderivative(t) - c.antiderivative(t)
    cv = c(t)
    r = g(t) - cv
    U = _crra_utility(cv, p)
    if p == 0.0:
        f = inner + r + U
    else:
        f = np.exp(p * inner) * (r + U)
    return float(np.sum((f * wi).sum(axis=1) * L))


def _cara_utility(D, a: float):
    return -np.exp(-a * np.asarray(D, dtype=float)) / a


def cara_global_value(h: TimePath, D: TimePath, a: float) -> float:
    """H for kernel path h and excess-consumption path D."""
    T = h.horizon
    if h.is_step and D.is_step:
        edges = union_edges(h, D)
        h, D = h.on(edges), D.on(edges)
        u = T - edges + 1.0
        ell = np.log(u[:-1] / u[1:])
        r = h.values - D.values
        U = _cara_utility(D.values, a)
        J0 = np.concatenate([[0.0], np.cumsum(r * ell)])[:-1]
        cells = np.exp(-a * J0) * (r * ell * psi(a * r * ell) + U * u[:-1] * ell * psi((a * r + 1.0) * ell))
        return float(np.sum(cells))
    edges = refine_edges(union_edges(h, D))
    qr = FunctionPath(edges, lambda s: q_of(s, T) * (h(s) - D(s)))
    xi, wi = gauss_legendre()
    lo, hi = edges[:-1], edges[1:]
    L = hi - lo
    t = lo[:, None] + L[:, None] * xi[None, :]
    Dv = D(t)
    f = np.exp(-a * qr.antiderivative(t)) * (q_of(t, T) * (h(t) - Dv) + _cara_utility(Dv, a))
    return float(np.sum((f * wi).sum(axis=1) * L))


def global_kernel_crra(policy: PolicyPath, theta: TripletPath, grid: TimeGrid | None, p: float) -> float:
    if policy.kind != "crra":
        raise ValidationError("CRRA global kernel needs a CRRA policy")
    return crra_global_value(crra_kernel_path(policy, theta, p), policy.consumption, p)


def global_kernel_cara(policy: PolicyPath, theta: TripletPath, grid: TimeGrid | None, a: float) -> float:
    if policy.kind != "cara":
        raise ValidationError("CARA global kernel needs a CARA policy")
    return cara_global_value(cara_kernel_path(policy, theta, a), policy.consumption, a)


def global_kernel(policy: PolicyPath, theta: TripletPath, utility: UtilitySpec) -> float:
    if utility.is_crra:
        return global_kernel_crra(policy, theta, None, utility.p)
    return global_kernel_cara(policy, theta, None, utility.a)


# ---------------------------------------------------------------------------
# kernel order


def kernel_dominates(pair, other, grid: TimeGrid, utility: UtilitySpec, *, tol: float = 0.0,
                     samples_per_cell: int = 5) -> bool:
    """True iff the local kernel of ``pair`` is >= that of ``other`` on every cell.

    Each pair is (investment path of shape (n_cells, d), TripletPath).  CARA
    kernels vary inside a cell through q_t, so they are compared at
    ``samples_per_cell`` equally spaced times including both cell ends.
    """
    (x1, th1), (x2, th2) = pair, other
    x1 = np.asarray(x1, float).reshape(grid.n_cells, -1)
    x2 = np.asarray(x2, float).reshape(grid.n_cells, -1)
    if utility.is_crra:
        for k in range(grid.n_cells):
            if local_kernel_crra(x1[k], th1[k], utility.p) < local_kernel_crra(x2[k], th2[k], utility.p) - tol:
                return False
        return True
    edges = grid.edges
    T = grid.horizon
    for k in range(grid.n_cells):
        ts = np.linspace(edges[k], edges[k + 1], samples_per_cell)
        h1 = cara_kernel_in_time(x1[k], th1[k], utility.a, T, ts)
        h2 = cara_kernel_in_time(x2[k], th2[k], utility.a, T, ts)
        if np.any(h1 < h2 - tol):
            return False
    return True
