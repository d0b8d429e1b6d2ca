"""Per-cell saddle points of the local kernel and assembly of the optimal paths.

The inner minimum over a vertex hull is attained at a vertex (the kernel
is affine in the triplet).  The outer maximum of phi(x) = min_i f_i(x)
uses Kelley cutting planes with level stabilization, then a Newton step
on the KKT system of the active vertices.  The KKT multipliers are the
hull weights of the worst-case triplet.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog, nnls

from .errors import AssumptionViolation, LPFailure, NoConvergence, SaddleCertificateFailure
from .kernels import (
    TripletPath,
    _cara_jump_term,
    _crra_jump_term,
    local_kernel_cara_grad,
    local_kernel_cara_hess,
    local_kernel_crra_grad,
    local_kernel_crra_hess,
)
from .market import (
    ConfidenceSet,
    LevyTriplet,
    MarketSpec,
    Region,
    admissible_region,
    check_nondegeneracy,
    check_sharpe_cara,
    check_sharpe_crra,
    jump_support_union,
    mix_triplets,
)


@dataclass(frozen=True)
class SolverConfig:
    margin: int = 10**6
    tol: float = 1e-9
    max_cuts: int = 400
    n_samples: int = 1000
    lattice: int = 11
    cert_tol: float = 1e-6
    seed: int = 0

    def __post_init__(self):
        if not self.tol > 0 or not self.cert_tol > 0:
            raise ValueError("tolerances must be positive")
        if self.margin < 1 or self.max_cuts < 1:
            raise ValueError("margin and max_cuts must be positive")


@dataclass(frozen=True)
class KernelContext:
    """Which local kernel to use: CRRA with exponent p, or CARA with (q, a)."""

    family: str
    p: float = 0.0
    q: float = 1.0
    a: float = 1.0

    @classmethod
    def crra(cls, p: float):
        return cls("crra", p=p)

    @classmethod
    def cara(cls, q: float, a: float):
        return cls("cara", q=q, a=a)

    @property
    def is_crra(self) -> bool:
        return self.family == "crra"

    def jump_term(self, s):
        return _crra_jump_term(s, self.p) if self.is_crra else _cara_jump_term(s, self.a * self.q)

    @property
    def curvature(self) -> float:
        """Coefficient c in x.b - (c/2) x'Sigma x."""
        return 1.0 - self.p if self.is_crra else self.a * self.q

    def values(self, X, theta: LevyTriplet):
        X = np.atleast_2d(X)
        val = X @ theta.drift - 0.5 * self.curvature * np.einsum("ki,ij,kj->k", X, theta.covariance, X)
        F = theta.jumps
        if F.n_atoms:
            val = val + self.jump_term(X @ F.locations.T) @ F.intensities
        return val

    def value(self, x, theta: LevyTriplet) -> float:
        return float(self.values(np.asarray(x, float).reshape(1, -1), theta)[0])

    def grad(self, x, theta):
        if self.is_crra:
            return local_kernel_crra_grad(x, theta, self.p)
        return local_kernel_cara_grad(x, theta, self.q, self.a)

    def hess(self, x, theta):
        if self.is_crra:
            return local_kernel_crra_hess(x, theta, self.p)
        return local_kernel_cara_hess(x, theta, self.q, self.a)


@dataclass(frozen=True)
class InnerResult:
    value: float
    index: int
    triplet: LevyTriplet


@dataclass
class SaddleCell:
    cell: int
    x: np.ndarray
    theta: LevyTriplet
    weights: np.ndarray
    value: float
    certificate: float
    iterations: int = 0
    polished: bool = False


def inner_min(x, cset: ConfidenceSet, ctx: KernelContext) -> InnerResult:
    """Minimum of the local kernel over the hull: the best vertex, lowest index on ties."""
    x = np.asarray(x, dtype=float).reshape(1, -1)
    vals = np.array([ctx.values(x, v)[0] for v in cset.vertices])
    i = int(np.argmin(vals))
    return InnerResult(float(vals[i]), i, cset.vertices[i])


def _vertex_values(X, cset, ctx) -> np.ndarray:
    """(k, m) kernel values at k points for the m vertices."""
    return np.column_stack([ctx.values(X, v) for v in cset.vertices])


# ---------------------------------------------------------------------------
# outer maximization


@dataclass
class _Domain:
    """Polyhedral part of the region (A x <= rhs) and the box |x_i| <= radius."""

    A: np.ndarray
    rhs: np.ndarray
    radius: float
    trust: bool  # box is an artificial trust region that may be enlarged

    def contains(self, x) -> bool:
        return bool(np.all(np.abs(x) <= self.radius * (1 + 1e-12)) and np.all(self.A @ x <= self.rhs + 1e-12))

    def on_box_edge(self, x) -> bool:
        return bool(np.max(np.abs(x)) >= self.radius * (1 - 1e-6))

    def on_poly_edge(self, x) -> bool:
        return bool(self.A.size and np.any(self.A @ x >= self.rhs - 1e-9 * np.maximum(1.0, np.abs(self.rhs))))


def _lp(c, A_ub, b_ub, bounds):
    res = linprog(c, A_ub=A_ub, b_ub=b_ub, bounds=bounds, method="highs")
    if res.status != 0:
        raise LPFailure(f"cutting-plane LP failed: {res.message}")
    return res


def _cutting_plane(cset, ctx, dom: _Domain, cfg: SolverConfig, x0, polish=None):
    """Level-stabilized Kelley method; ``polish(x)`` may end the run early with a KKT point."""
    d = cset.dim
    m = len(cset)
    cut_rows, cut_rhs = [], []
    best_x = np.asarray(x0, float).copy()
    best_val = -np.inf

    def add_cuts(x):
        nonlocal best_x, best_val
        vals = np.array([ctx.value(x, v) for v in cset.vertices])
        phi = float(vals.min())
        if phi > best_val:
            best_val, best_x = phi, x.copy()
        for i, v in enumerate(cset.vertices):
            g = ctx.grad(x, v)
            # t - g.x <= f_i(x) - g.x_j, scaled so steep cuts near the boundary stay well conditioned
            s = max(1.0, float(np.abs(g).max()))
            cut_rows.append(np.concatenate([-g, [1.0]]) / s)
            cut_rhs.append((vals[i] - g @ x) / s)

    poly = np.hstack([dom.A, np.zeros((dom.A.shape[0], 1))]) if dom.A.size else np.zeros((0, d + 1))
    box = [(-dom.radius, dom.radius)] * d
    add_cuts(best_x)
    ub = np.inf
    for it in range(1, cfg.max_cuts + 1):
        A = np.vstack([np.array(cut_rows), poly])
        b = np.concatenate([np.array(cut_rhs), dom.rhs])
        c = np.zeros(d + 1)
        c[-1] = -1.0
        res = _lp(c, A, b, box + [(None, None)])
        ub = min(ub, float(-res.fun))
        gap = ub - best_val
        if gap <= cfg.tol * max(1.0, abs(best_val)):
            return best_x, best_val, it, None
        if polish is not None and it % 5 == 0 and gap < 1e-3 * max(1.0, abs(best_val)):
            got = polish(best_x, best_val)
            if got is not None:
                return got[0], got[1], it, got
        level = best_val + 0.3 * gap
        # infinity-norm projection of the incumbent on the level set of the model;
        # with t fixed at the level each cut a.x + s t <= rhs becomes a.x <= rhs - s level
        nc = len(cut_rows)
        cuts = np.array(cut_rows)
        Ap = [np.hstack([cuts[:, :d], np.zeros((nc, 1))])]
        bp = [np.array(cut_rhs) - level * cuts[:, d]]
        eye = np.eye(d)
        Ap.append(np.hstack([eye, -np.ones((d, 1))]))
        bp.append(best_x)
        Ap.append(np.hstack([-eye, -np.ones((d, 1))]))
        bp.append(-best_x)
        if dom.A.size:
            Ap.append(np.hstack([dom.A, np.zeros((dom.A.shape[0], 1))]))
            bp.append(dom.rhs)
        cproj = np.zeros(d + 1)
        cproj[-1] = 1.0
        try:
            pr = _lp(cproj, np.vstack(Ap), np.concatenate(bp), box + [(0, None)])
            x_next = pr.x[:d]
        except LPFailure:
            x_next = res.x[:d]
        add_cuts(x_next)
    raise NoConvergence(f"cutting planes did not close the gap ({ub - best_val:.3e}) in {cfg.max_cuts} iterations")


def _kkt_polish(cset, ctx, x0, active, dom: _Domain, max_iter: int = 60):
    """Newton on  sum_A lam_i grad f_i = 0,  f_i = t (i in A),  sum lam = 1.

    Returns (x, t, weights over all vertices) or None when it fails.
    """
    verts = cset.vertices
    d = x0.size
    active = list(active)
    x = x0.copy()
    for _ in range(d + 2 * len(verts) + 2):
        k = len(active)
        G = np.array([ctx.grad(x, verts[i]) for i in active]).T  # d x k
        lam, _ = nnls(np.vstack([G, np.ones((1, k))]), np.concatenate([np.zeros(d), [1.0]]))
        if lam.sum() <= 0:
            lam = np.full(k, 1.0 / k)
        t = float(min(ctx.value(x, verts[i]) for i in active))
        ok = False
        for _ in range(max_iter):
            grads = [ctx.grad(x, verts[i]) for i in active]
            fvals = np.array([ctx.value(x, verts[i]) for i in active])
            r1 = sum(l * g for l, g in zip(lam, grads))
            r2 = fvals - t
            r3 = lam.sum() - 1.0
            F = np.concatenate([r1, r2, [r3]])
            J = np.zeros((d + k + 1, d + 1 + k))
            J[:d, :d] = sum(l * ctx.hess(x, verts[i]) for l, i in zip(lam, active))
            J[:d, d + 1 :] = np.array(grads).T
            J[d : d + k, :d] = np.array(grads)
            J[d : d + k, d] = -1.0
            J[d + k, d + 1 :] = 1.0
            step = np.linalg.lstsq(J, -F, rcond=None)[0]
            # damp steps that leave the region
            alpha = 1.0
            for _ in range(40):
                xn = x + alpha * step[:d]
                if dom.contains(xn) and not dom.on_poly_edge(xn):
                    break
                alpha *= 0.5
            else:
                return None
            x = xn
            t += alpha * step[d]
            lam = lam + alpha * step[d + 1 :]
            if np.max(np.abs(F)) < 1e-15 or np.max(np.abs(alpha * step)) < 1e-15 * max(1.0, np.abs(x).max()):
                ok = True
                break
        if not ok or not np.max(np.abs(F)) < 1e-11 * max(1.0, abs(t)):
            # no exact KKT point on this active set (e.g. more ties than d + 1): shrink it
            if k <= 1:
                return None
            active.pop(int(np.argmin(lam)))
            continue
        if np.all(lam >= -1e-12):
            # a vertex left out of the active set may now lie below t: bring it back
            allv = np.array([ctx.value(x, v) for v in verts])
            j = int(np.argmin(allv))
            if allv[j] < t - 1e-12 * max(1.0, abs(t)) and j not in active:
                active = [i for i, l in zip(active, lam) if l > 1e-12] + [j]
                continue
            w = np.zeros(len(verts))
            w[active] = np.clip(lam, 0.0, None)
            w /= w.sum()
            return x, t, w
        active = [i for i, l in zip(active, lam) if l > 0]
        if not active:
            return None
    return None


def _weights_at(cset, ctx, x, active) -> np.ndarray:
    """Hull weights of the worst-case triplet from the stationarity condition (least squares)."""
    verts = cset.vertices
    d = x.size
    G = np.array([ctx.grad(x, verts[i]) for i in active]).T
    lam, _ = nnls(np.vstack([G, np.ones((1, len(active)))]), np.concatenate([np.zeros(d), [1.0]]))
    w = np.zeros(len(verts))
    w[list(active)] = lam
    s = w.sum()
    if s <= 0:
        w[list(active)[0]] = 1.0
        s = 1.0
    return w / s


def _active_set(vals: np.ndarray, tol: float) -> list[int]:
    phi = vals.min()
    return [i for i, v in enumerate(vals) if v - phi <= tol * max(1.0, abs(phi))]


def _domain(cset: ConfidenceSet, ctx: KernelContext, cfg: SolverConfig, region: Region | None) -> _Domain:
    d = cset.dim
    if ctx.is_crra:
        if region is None:
            region = admissible_region(jump_support_union(cset), cfg.margin)
        if not region.unbounded:
            A, rhs = region.constraint_matrix()
            return _Domain(A, rhs, float(region.radius), False)
    # trust box sized from the jump-free quadratic maximizers
    guesses = [np.linalg.solve(ctx.curvature * v.covariance, v.drift) for v in cset.vertices]
    r0 = max(1.0, 2.0 * max(np.abs(g).max() for g in guesses))
    return _Domain(np.zeros((0, d)), np.zeros(0), r0, True)


def outer_max(cset: ConfidenceSet, region: Region | None, ctx: KernelContext, cfg: SolverConfig = SolverConfig(),
              *, x0=None, active0=None):
    """Maximize phi(x) = min_i f_i(x); returns (x*, value, weights, iterations, polished)."""
    dom = _domain(cset, ctx, cfg, region)
    d = cset.dim
    # warm start: Newton from a previous solution and its active set
    if x0 is not None and active0 is not None and dom.contains(np.asarray(x0, float)):
        got = _kkt_polish(cset, ctx, np.asarray(x0, float), active0, dom)
        if got is not None:
            x, t, w = got
            vals = np.array([ctx.value(x, v) for v in cset.vertices])
            if vals.min() >= t - 1e-12 * max(1.0, abs(t)) and not dom.on_box_edge(x):
                return x, float(vals.min()), w, 0, True
    def polish(x, val):
        # a KKT point with nonnegative multipliers is the global max (concavity)
        if dom.on_poly_edge(x):
            return None
        vals = np.array([ctx.value(x, v) for v in cset.vertices])
        got = _kkt_polish(cset, ctx, x, _active_set(vals, 1e-6), dom)
        if got is None:
            return None
        xp, t, w = got
        valsp = np.array([ctx.value(xp, v) for v in cset.vertices])
        if valsp.min() < val - 1e-12 * max(1.0, abs(val)) or dom.on_box_edge(xp):
            return None
        return xp, float(valsp.min()), w

    for _ in range(64):
        x, val, iters, got = _cutting_plane(cset, ctx, dom, cfg, np.zeros(d), polish)
        if dom.trust and dom.on_box_edge(x):
            dom = _Domain(dom.A, dom.rhs, 2.0 * dom.radius, True)
            continue
        break
    else:
        raise NoConvergence("trust region kept growing")
    if got is None:
        got = polish(x, val)
    if got is not None:
        return got[0], got[1], got[2], iters, True
    vals = np.array([ctx.value(x, v) for v in cset.vertices])
    return x, val, _weights_at(cset, ctx, x, _active_set(vals, 1e-6)), iters, False


# ---------------------------------------------------------------------------
# certification


def _mixture_values(x, cset, ctx, W) -> np.ndarray:
    """Kernel at x for the mixed triplets with weight rows W, built from mixed (b, Sigma, F)."""
    drifts = np.array([v.drift for v in cset.vertices])
    covs = np.array([v.covariance for v in cset.vertices])
    jump = np.array([
        ctx.jump_term(v.jumps.locations @ x) @ v.jumps.intensities if v.jumps.n_atoms else 0.0
        for v in cset.vertices
    ])
    B = W @ drifts
    S = np.tensordot(W, covs, axes=1)
    return B @ x - 0.5 * ctx.curvature * np.einsum("i,kij,j->k", x, S, x) + W @ jump


def saddle_certificate(cset, ctx, x_star, weights, value, cfg: SolverConfig, dom_sampler, rng) -> float:
    """Largest violation of g(x, theta*) <= g* <= g(x*, theta) over samples and vertices."""
    m = len(cset)
    theta_star = mix_triplets(cset.vertices, weights)
    X = dom_sampler(rng, cfg.n_samples)
    v1 = float(np.max(ctx.values(X, theta_star) - value)) if X.size else -np.inf
    W = np.vstack([np.eye(m), rng.dirichlet(np.ones(m), size=cfg.n_samples)])
    v2 = float(np.max(value - _mixture_values(np.asarray(x_star, float), cset, ctx, W)))
    # the pair itself must reproduce the value
    v3 = abs(ctx.value(x_star, theta_star) - value)
    return max(v1, v2, v3, 0.0)


def domain_sampler(cset, ctx, cfg, region, x_star):
    dom = _domain(cset, ctx, cfg, region)
    if ctx.is_crra and not dom.trust:
        reg = region if region is not None else admissible_region(jump_support_union(cset), cfg.margin)
        return lambda rng, k: reg.sample(rng, k)
    r = max(dom.radius, 2.0 * float(np.abs(x_star).max()))
    d = cset.dim
    return lambda rng, k: rng.uniform(-r, r, size=(k, d))


def local_saddle(cset: ConfidenceSet, ctx: KernelContext, cfg: SolverConfig = SolverConfig(), *,
                 region: Region | None = None, cell: int = 0, x0=None, active0=None) -> SaddleCell:
    x, val, w, iters, polished = outer_max(cset, region, ctx, cfg, x0=x0, active0=active0)
    inner = inner_min(x, cset, ctx)
    val = inner.value
    rng = np.random.default_rng([cfg.seed, cell])
    cert = saddle_certificate(cset, ctx, x, w, val, cfg, domain_sampler(cset, ctx, cfg, region, x), rng)
    theta = mix_triplets(cset.vertices, w)
    out = SaddleCell(cell, x, theta, w, val, cert, iters, polished)
    if cert > cfg.cert_tol:
        raise SaddleCertificateFailure(
            f"saddle certificate {cert:.3e} exceeds {cfg.cert_tol:g} at cell {cell}", violation=cert, x=x, weights=w
        )
    return out


# ---------------------------------------------------------------------------
# assembly over the grid


@dataclass
class SaddleSkeleton:
    cells: list[SaddleCell]
    invest: np.ndarray
    theta: TripletPath
    cell_kernel: np.ndarray
    certificates: np.ndarray
    checks: list[dict] = field(default_factory=list)


def check_segment(cset: ConfidenceSet, spec: MarketSpec, t0: float, cfg: SolverConfig) -> dict:
    """Standing assumptions for one segment; raises on failure, returns the report values."""
    out: dict = {}
    sup = jump_support_union(cset)
    if not sup.empty:
        rep = check_nondegeneracy(sup)
        out.update(kappa_nd=rep.kappa_nd, kappa_bound=rep.kappa_bound)
    u = spec.utility
    if u.is_crra:
        sc = check_sharpe_crra(cset, u.p, lattice=cfg.lattice)
    else:
        sc = check_sharpe_cara(cset, t0, spec.horizon, lattice=cfg.lattice)
    out.update(sharpe_sq_max=sc.worst_value, sharpe_sq_bound=sc.bound)
    if not sc.passed:
        raise AssumptionViolation(
            f"squared Sharpe ratio {sc.worst_value:.6g} exceeds {sc.bound:.6g} at weights {sc.worst_weights}"
        )
    return out


def cell_average_q(t0: float, t1: float, T: float) -> float:
    """(1/L) int q_t dt over the cell."""
    return float(np.log((T - t0 + 1.0) / (T - t1 + 1.0)) / (t1 - t0))


def solve_policy_measure(spec: MarketSpec, cfg: SolverConfig = SolverConfig()) -> SaddleSkeleton:
    grid = spec.grid
    edges = grid.edges
    seg = grid.cell_segment
    u = spec.utility
    checks = [check_segment(s, spec, grid.breakpoints[k], cfg) for k, s in enumerate(spec.sets)]
    cells: list[SaddleCell] = []
    failures = []
    cache: dict[int, SaddleCell] = {}
    prev = None
    for k in range(grid.n_cells):
        cset = spec.sets[seg[k]]
        try:
            if u.is_crra:
                key = id(cset)
                if key not in cache:
                    cache[key] = local_saddle(cset, KernelContext.crra(u.p), cfg, cell=k)
                c = cache[key]
                cell = SaddleCell(k, c.x, c.theta, c.weights, c.value, c.certificate, c.iterations, c.polished)
            else:
                q = cell_average_q(edges[k], edges[k + 1], spec.horizon)
                warm = {}
                if prev is not None and seg[k - 1] == seg[k]:
                    warm = dict(x0=prev.x, active0=list(np.nonzero(prev.weights > 0)[0]))
                cell = local_saddle(cset, KernelContext.cara(q, u.a), cfg, cell=k, **warm)
            cells.append(cell)
            prev = cell
        except (SaddleCertificateFailure, NoConvergence, LPFailure) as exc:
            failures.append((k, exc))
            prev = None
    if failures:
        idx = ", ".join(str(k) for k, _ in failures)
        first = failures[0][1]
        raise SaddleCertificateFailure(
            f"saddle solve failed at cells [{idx}]: {first}", violation=getattr(first, "violation", None)
        )
    invest = np.array([c.x for c in cells])
    theta = TripletPath(tuple(c.theta for c in cells), tuple(c.weights for c in cells))
    return SaddleSkeleton(
        cells, invest, theta, np.array([c.value for c in cells]), np.array([c.certificate for c in cells]), checks
    )


def solve(spec: MarketSpec, cfg: SolverConfig = SolverConfig()):
    """Saddle skeleton plus closed-form consumption and values: a full SaddleSolution."""
    from .kernels import PolicyPath, cara_kernel_path
    from .paths import StepPath
    from .policy import assemble_solution

    sk = solve_policy_measure(spec, cfg)
    edges = spec.grid.edges
    u = spec.utility
    if u.is_crra:
        kernel = StepPath(edges, sk.cell_kernel)
    else:
        kernel = cara_kernel_path(PolicyPath("cara", sk.invest, 0.0, edges), sk.theta, u.a)
    sol = assemble_solution(u, spec.w0, edges, sk.invest, sk.theta, kernel,
                            cell_kernel=sk.cell_kernel, certificates=sk.certificates)
    sol.meta["checks"] = sk.checks
    sol.meta["iterations"] = [c.iterations for c in sk.cells]
    return sol
