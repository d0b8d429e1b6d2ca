"""Markets under ambiguity: Levy triplets, confidence sets and standing-assumption checks.

A confidence set is stored as the convex hull of finitely many vertex
triplets.  Jump measures are finite lists of atoms, so every integral
against a Levy measure is an exact weighted sum.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.spatial import ConvexHull, QhullError

from .errors import DegenerateSupport, ValidationError

FloatArray = NDArray[np.float64]

UTILITY_FAMILIES = ("crra-log", "crra-power", "cara")


def _as_matrix(a: ArrayLike, d: int) -> FloatArray:
    m = np.atleast_2d(np.asarray(a, dtype=float))
    if m.shape != (d, d):
        raise ValidationError(f"expected a {d}x{d} matrix, got shape {m.shape}")
    return m


@dataclass(frozen=True, eq=False)
class DiscreteLevyMeasure:
    """Finite-activity Levy measure: atoms at ``locations`` with jump rates ``intensities``.

    ``locations`` has shape (m, d); ``intensities`` has shape (m,) and is in
    jumps per unit time.
    """

    locations: FloatArray
    intensities: FloatArray

    def __post_init__(self):
        loc = np.asarray(self.locations, dtype=float)
        w = np.asarray(self.intensities, dtype=float).reshape(-1)
        if loc.ndim == 1:
            loc = loc.reshape(-1, 1) if w.size != 1 or loc.size == 1 else loc.reshape(1, -1)
        if loc.ndim != 2 or loc.shape[0] != w.size:
            raise ValidationError("locations must be (m, d) with one intensity per atom")
        if not np.all(np.isfinite(loc)) or not np.all(np.isfinite(w)):
            raise ValidationError("jump measure entries must be finite")
        if np.any(w <= 0):
            raise ValidationError("atom intensities must be strictly positive")
        if w.size and np.any(np.all(loc == 0.0, axis=1)):
            raise ValidationError("a Levy measure puts no mass at the origin")
        if w.size > 1 and np.unique(loc, axis=0).shape[0] != w.size:
            raise ValidationError("atom locations must be pairwise distinct")
        loc.setflags(write=False)
        w.setflags(write=False)
        object.__setattr__(self, "locations", loc)
        object.__setattr__(self, "intensities", w)

    @classmethod
    def empty(cls, dim: int) -> "DiscreteLevyMeasure":
        return cls(np.zeros((0, dim)), np.zeros(0))

    @classmethod
    def from_atoms(cls, atoms: Sequence[tuple[ArrayLike, float]], dim: int) -> "DiscreteLevyMeasure":
        if not atoms:
            return cls.empty(dim)
        loc = np.array([np.atleast_1d(np.asarray(z, dtype=float)) for z, _ in atoms])
        w = np.array([float(wi) for _, wi in atoms])
        return cls(loc.reshape(len(atoms), dim), w)

    @property
    def dim(self) -> int:
        return self.locations.shape[1]

    @property
    def n_atoms(self) -> int:
        return self.intensities.size

    @property
    def total_intensity(self) -> float:
        return float(self.intensities.sum())

    def __eq__(self, other):
        if not isinstance(other, DiscreteLevyMeasure):
            return NotImplemented
        return (
            self.locations.shape == other.locations.shape
            and np.array_equal(self.locations, other.locations)
            and np.array_equal(self.intensities, other.intensities)
        )

    def __hash__(self):
        return hash((self.locations.tobytes(), self.intensities.tobytes()))


@dataclass(frozen=True, eq=False)
class LevyTriplet:
    """Differential characteristic (drift, covariance, jump measure), all per unit time."""

    drift: FloatArray
    covariance: FloatArray
    jumps: DiscreteLevyMeasure = None  # type: ignore[assignment]
    chol: FloatArray = field(init=False, repr=False)

    def __post_init__(self):
        b = np.atleast_1d(np.asarray(self.drift, dtype=float)).reshape(-1)
        d = b.size
        cov = _as_matrix(self.covariance, d)
        if not np.allclose(cov, cov.T, rtol=0.0, atol=1e-14 * max(1.0, np.abs(cov).max())):
            raise ValidationError("covariance must be symmetric")
        cov = 0.5 * (cov + cov.T)
        try:
            chol = np.linalg.cholesky(cov)
        except np.linalg.LinAlgError as exc:
            raise ValidationError("covariance must be positive definite") from exc
        jumps = self.jumps if self.jumps is not None else DiscreteLevyMeasure.empty(d)
        if jumps.dim != d:
            raise ValidationError(f"jump locations have dimension {jumps.dim}, drift has {d}")
        for arr in (b, cov, chol):
            arr.setflags(write=False)
        object.__setattr__(self, "drift", b)
        object.__setattr__(self, "covariance", cov)
        object.__setattr__(self, "jumps", jumps)
        object.__setattr__(self, "chol", chol)

    @property
    def dim(self) -> int:
        return self.drift.size

    def sharpe_squared(self) -> float:
        """b^T Sigma^{-1} b."""
        y = np.linalg.solve(self.chol, self.drift)
        return float(y @ y)

    def __eq__(self, other):
        if not isinstance(other, LevyTriplet):
            return NotImplemented
        return (
            np.array_equal(self.drift, other.drift)
            and np.array_equal(self.covariance, other.covariance)
            and self.jumps == other.jumps
        )

    def __hash__(self):
        return hash((self.drift.tobytes(), self.covariance.tobytes(), hash(self.jumps)))


def mix_triplets(vertices: Sequence[LevyTriplet], weights: ArrayLike) -> LevyTriplet:
    """Convex combination of triplets.

    Drift and covariance mix linearly; the jump measure is the weighted
    superposition of the vertex measures (atoms at the same location merge).
    """
    lam = np.asarray(weights, dtype=float).reshape(-1)
    if lam.size != len(vertices):
        raise ValidationError("one weight per vertex is required")
    if np.any(lam < -1e-12) or abs(lam.sum() - 1.0) > 1e-9:
        raise ValidationError("mixture weights must lie in the simplex")
    lam = np.clip(lam, 0.0, None)
    lam = lam / lam.sum()
    drift = sum(l * v.drift for l, v in zip(lam, vertices))
    cov = sum(l * v.covariance for l, v in zip(lam, vertices))
    d = vertices[0].dim
    merged: dict[tuple[float, ...], float] = {}
    for l, v in zip(lam, vertices):
        if l == 0.0:
            continue
        for z, w in zip(v.jumps.locations, v.jumps.intensities):
            key = tuple(z.tolist())
            merged[key] = merged.get(key, 0.0) + l * w
    keys = sorted(merged)
    jumps = DiscreteLevyMeasure(
        np.array(keys, dtype=float).reshape(len(keys), d), np.array([merged[k] for k in keys])
    )
    return LevyTriplet(drift, cov, jumps)


@dataclass(frozen=True)
class ConfidenceSet:
    """Convex hull of finitely many vertex triplets, with optional declared bound ``kappa``."""

    vertices: tuple[LevyTriplet, ...]
    kappa: float | None = None

    def __post_init__(self):
        verts = tuple(self.vertices)
        if not verts:
            raise ValidationError("a confidence set needs at least one vertex")
        d = verts[0].dim
        if any(v.dim != d for v in verts):
            raise ValidationError("all vertices must share the same dimension")
        if self.kappa is not None and not self.kappa > 0:
            raise ValidationError("kappa must be positive")
        object.__setattr__(self, "vertices", verts)

    @property
    def dim(self) -> int:
        return self.vertices[0].dim

    def __len__(self) -> int:
        return len(self.vertices)

    def mixture(self, weights: ArrayLike) -> LevyTriplet:
        return mix_triplets(self.vertices, weights)

    def required_bound(self, epsilon: float) -> float:
        """Smallest kappa with |b|, ||Sigma||_2 and d_L^eps(F, 0) all below it, over the vertices."""
        from .metric import weighted_measure

        out = 0.0
        for v in self.vertices:
            jump_size = weighted_measure(v.jumps, epsilon).total_intensity
            out = max(
                out,
                float(np.linalg.norm(v.drift)),
                float(np.linalg.norm(v.covariance, 2)),
                jump_size,
            )
        return out

    def check_bound(self, epsilon: float) -> float:
        req = self.required_bound(epsilon)
        if self.kappa is not None and req > self.kappa * (1 + 1e-12):
            raise ValidationError(f"declared bound kappa={self.kappa} is below the vertex bound {req}")
        return req


@dataclass(frozen=True)
class TimeGrid:
    """Breakpoints of the piecewise-constant correspondence plus a uniform refinement step."""

    horizon: float
    breakpoints: tuple[float, ...]
    step: float

    def __post_init__(self):
        bp = tuple(float(b) for b in self.breakpoints)
        if not self.horizon > 0:
            raise ValidationError("horizon must be positive")
        if len(bp) < 2 or bp[0] != 0.0 or abs(bp[-1] - self.horizon) > 1e-12 * self.horizon:
            raise ValidationError("breakpoints must run from 0 to the horizon")
        if any(b1 <= b0 for b0, b1 in zip(bp, bp[1:])):
            raise ValidationError("breakpoints must be strictly increasing")
        if not self.step > 0:
            raise ValidationError("grid step must be positive")
        for b0, b1 in zip(bp, bp[1:]):
            ratio = (b1 - b0) / self.step
            if ratio < 1 - 1e-9 or abs(ratio - round(ratio)) > 1e-6 * max(1.0, ratio):
                raise ValidationError(
                    f"step {self.step} does not divide segment [{b0}, {b1}]"
                )
        bp = bp[:-1] + (float(self.horizon),)
        object.__setattr__(self, "breakpoints", bp)

    @classmethod
    def uniform(cls, horizon: float, step: float, breakpoints: Sequence[float] | None = None):
        return cls(horizon, tuple(breakpoints) if breakpoints else (0.0, horizon), step)

    @property
    def n_segments(self) -> int:
        return len(self.breakpoints) - 1

    @property
    def edges(self) -> FloatArray:
        """Cell edges of the refined grid (segment breakpoints are always edges)."""
        out = [0.0]
        for b0, b1 in zip(self.breakpoints, self.breakpoints[1:]):
            n = int(round((b1 - b0) / self.step))
            out.extend(np.linspace(b0, b1, n + 1)[1:].tolist())
        return np.array(out)

    @property
    def n_cells(self) -> int:
        return self.edges.size - 1

    @property
    def cell_segment(self) -> NDArray[np.int64]:
        """Segment index of every refined cell."""
        idx = []
        for k, (b0, b1) in enumerate(zip(self.breakpoints, self.breakpoints[1:])):
            idx.extend([k] * int(round((b1 - b0) / self.step)))
        return np.array(idx, dtype=np.int64)

    def segment_of(self, t: float) -> int:
        k = int(np.searchsorted(self.breakpoints, t, side="right")) - 1
        return min(max(k, 0), self.n_segments - 1)


@dataclass(frozen=True)
class UtilitySpec:
    """CRRA (log or power with exponent ``p``) or CARA (risk aversion ``a``)."""

    family: str
    p: float = 0.0
    a: float = 1.0

    def __post_init__(self):
        if self.family not in UTILITY_FAMILIES:
            raise ValidationError(f"unknown utility family {self.family!r}")
        if self.family == "crra-log" and self.p != 0.0:
            raise ValidationError("log utility has p = 0")
        if self.family == "crra-power" and (self.p == 0.0 or not self.p < 1.0):
            raise ValidationError("power utility requires p in (-inf, 0) U (0, 1)")
        if self.family == "cara" and not self.a > 0:
            raise ValidationError("CARA utility requires a > 0")

    @classmethod
    def log(cls):
        return cls("crra-log")

    @classmethod
    def power(cls, p: float):
        return cls("crra-power", p=p)

    @classmethod
    def cara(cls, a: float):
        return cls("cara", a=a)

    @property
    def is_crra(self) -> bool:
        return self.family != "cara"

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        if self.family == "crra-log":
            return np.log(x)
        if self.family == "crra-power":
            return x**self.p / self.p
        return -np.exp(-self.a * x) / self.a


@dataclass(frozen=True)
class MarketSpec:
    """Time grid, one confidence set per segment, utility, initial wealth and metric exponent."""

    grid: TimeGrid
    sets: tuple[ConfidenceSet, ...]
    utility: UtilitySpec
    w0: float
    epsilon: float = 2.0

    def __post_init__(self):
        sets = tuple(self.sets)
        if len(sets) != self.grid.n_segments:
            raise ValidationError(
                f"{len(sets)} confidence sets for {self.grid.n_segments} segments"
            )
        if not 0.0 < self.epsilon <= 2.0:
            raise ValidationError("metric exponent epsilon must lie in (0, 2]")
        if any(s.dim != sets[0].dim for s in sets):
            raise ValidationError("all segments must share the market dimension")
        if self.utility.is_crra and not self.w0 > 0:
            raise ValidationError("CRRA utilities need positive initial wealth")
        for s in sets:
            s.check_bound(self.epsilon)
        object.__setattr__(self, "sets", sets)

    @property
    def dim(self) -> int:
        return self.sets[0].dim

    @property
    def horizon(self) -> float:
        return self.grid.horizon


# ---------------------------------------------------------------------------
# jump support and non-degeneracy


class SupportUnion(NamedTuple):
    points: FloatArray
    empty: bool


@dataclass(frozen=True)
class JumpSupportReport:
    support: FloatArray
    kappa_nd: float
    kappa_bound: float
    inscribed_radius: float
    sampled: bool = False


def jump_support_union(cset: ConfidenceSet) -> SupportUnion:
    """Deduplicated union of atom locations over all vertices, sorted lexicographically."""
    d = cset.dim
    pts = [v.jumps.locations for v in cset.vertices if v.jumps.n_atoms]
    if not pts:
        return SupportUnion(np.zeros((0, d)), True)
    return SupportUnion(np.unique(np.vstack(pts), axis=0), False)


def _support_array(support) -> FloatArray:
    if isinstance(support, SupportUnion):
        support = support.points
    pts = np.asarray(support, dtype=float)
    if pts.ndim == 1:
        pts = pts.reshape(-1, 1)
    return pts


def _unit_directions(d: int, n: int, seed: int = 0) -> FloatArray:
    u = np.random.default_rng(seed).standard_normal((n, d))
    return u / np.linalg.norm(u, axis=1, keepdims=True)


def check_nondegeneracy(support, *, max_facets: int = 1000, n_directions: int = 20000) -> JumpSupportReport:
    """Radius of the largest origin-centred ball inside Conv(support U {0}).

    Exact via facet distances; above ``max_facets`` facets the radius is the
    minimum of the support function over sampled directions (an upper bound).
    """
    pts = _support_array(support)
    if pts.shape[0] == 0:
        raise ValueError("support must be nonempty")
    d = pts.shape[1]
    kappa_bound = float(np.linalg.norm(pts, axis=1).max())
    sampled = False
    if d == 1:
        z = pts[:, 0]
        radius = min(-min(z.min(), 0.0), max(z.max(), 0.0))
    else:
        try:
            hull = ConvexHull(np.vstack([pts, np.zeros(d)]))
        except QhullError as exc:
            raise DegenerateSupport("jump support hull is flat (no interior)") from exc
        if hull.equations.shape[0] > max_facets:
            dirs = _unit_directions(d, n_directions)
            radius = float(np.clip((dirs @ pts.T).max(axis=1), 0.0, None).min())
            sampled = True
        else:
            radius = float(-hull.equations[:, -1].max())
    scale = max(kappa_bound, 1.0)
    if radius <= 1e-14 * scale:
        raise DegenerateSupport("the origin lies on the boundary of Conv(S U {0})")
    return JumpSupportReport(pts, 1.0 / radius, kappa_bound, radius, sampled)


# ---------------------------------------------------------------------------
# Sharpe-ratio assumptions


@dataclass(frozen=True)
class SharpeCheck:
    passed: bool
    bound: float
    worst_value: float
    worst_weights: FloatArray | None
    worst_triplet: LevyTriplet | None = None

    @property
    def sharpe_bound(self) -> float:
        return float(np.sqrt(self.bound)) if np.isfinite(self.bound) else float("inf")


def crra_sharpe_bound(p: float) -> float:
    """Upper bound on b^T Sigma^{-1} b for power utility with p < 0 (infinite otherwise)."""
    if p >= 0:
        return float("inf")
    return 2.0 * (1.0 - p) ** 2 / (-p)


def cara_sharpe_bound(q: float) -> float:
    return 2.0 * q * (1.0 - np.log(q))


def _hull_lattice(m: int, lattice: int) -> FloatArray:
    """Vertex weights: the vertices themselves plus ``lattice`` points on every edge."""
    rows = [np.eye(m)[i] for i in range(m)]
    lam = np.linspace(0.0, 1.0, lattice)
    for i, j in itertools.combinations(range(m), 2):
        for l in lam[1:-1]:
            w = np.zeros(m)
            w[i], w[j] = 1.0 - l, l
            rows.append(w)
    if m > 2:
        rows.append(np.full(m, 1.0 / m))
    return np.array(rows)


def _sharpe_check(cset: ConfidenceSet, bound: float, lattice: int) -> SharpeCheck:
    weights = _hull_lattice(len(cset), lattice)
    drifts = np.array([v.drift for v in cset.vertices])
    covs = np.array([v.covariance for v in cset.vertices])
    worst, worst_w = -np.inf, None
    for w in weights:
        b = w @ drifts
        cov = np.tensordot(w, covs, axes=1)
        val = float(b @ np.linalg.solve(cov, b))
        if val > worst:
            worst, worst_w = val, w
    passed = worst <= bound * (1 + 1e-12)
    trip = None if passed else cset.mixture(worst_w)
    return SharpeCheck(passed, bound, worst, worst_w, trip)


def check_sharpe_crra(cset: ConfidenceSet, p: float, *, lattice: int = 11) -> SharpeCheck:
    """b^T Sigma^{-1} b <= 2(1-p)^2/(-p) at vertices and edge mixtures (vacuous for p >= 0)."""
    if p >= 0:
        return SharpeCheck(True, float("inf"), float("nan"), None)
    return _sharpe_check(cset, crra_sharpe_bound(p), lattice)


def check_sharpe_cara(cset: ConfidenceSet, t: float, T: float, *, lattice: int = 11) -> SharpeCheck:
    if not 0.0 <= t <= T:
        raise ValueError("need 0 <= t <= T")
    q = 1.0 / (T - t + 1.0)
    return _sharpe_check(cset, cara_sharpe_bound(q), lattice)


# ---------------------------------------------------------------------------
# admissible investment region


@dataclass(frozen=True)
class Region:
    """Polyhedron {x : x^T z >= -1 + 1/n for z in support}, inside the ball |x| < radius.

    ``margin is None`` encodes the open limit region x^T z > -1.  With an
    empty support the region is all of R^d (``unbounded``).
    """

    support: FloatArray
    margin: int | None
    radius: float
    unbounded: bool

    @property
    def dim(self) -> int:
        return self.support.shape[1]

    @property
    def floor(self) -> float:
        return -1.0 if self.margin is None else -1.0 + 1.0 / self.margin

    def constraint_matrix(self) -> tuple[FloatArray, FloatArray]:
        """(A, rhs) with A x <= rhs equivalent to x^T z >= floor."""
        A = -self.support
        return A, np.full(A.shape[0], -self.floor)

    def contains(self, x: ArrayLike) -> bool | NDArray[np.bool_]:
        x = np.asarray(x, dtype=float)
        pts = x.reshape(-1, self.dim)
        if self.unbounded:
            ok = np.ones(pts.shape[0], dtype=bool)
        else:
            s = pts @ self.support.T
            ok = np.all(s > -1.0, axis=1) if self.margin is None else np.all(s >= self.floor, axis=1)
        return bool(ok[0]) if x.ndim <= 1 and pts.shape[0] == 1 and x.size == self.dim else ok

    def interval(self) -> tuple[float, float]:
        """End points of the region when d = 1."""
        if self.dim != 1:
            raise ValueError("interval() is only defined for d = 1")
        if self.unbounded:
            return (-np.inf, np.inf)
        z = self.support[:, 0]
        lo = max((self.floor / zi for zi in z if zi > 0), default=-np.inf)
        hi = min((self.floor / zi for zi in z if zi < 0), default=np.inf)
        return (lo, hi)

    def sample(self, rng: np.random.Generator, k: int, box: float | None = None) -> FloatArray:
        """Uniform draws by rejection from the box [-r, r]^d intersected with the region."""
        r = box if box is not None else self.radius
        if not np.isfinite(r):
            raise ValueError("sampling an unbounded region needs an explicit box")
        out = np.empty((0, self.dim))
        while out.shape[0] < k:
            cand = rng.uniform(-r, r, size=(max(2 * k, 64), self.dim))
            out = np.vstack([out, cand[np.asarray(self.contains(cand))]])
        return out[:k]


def admissible_region(support, margin: int | None = None, *, radius: float | None = None) -> Region:
    """Investment ratios keeping 1 + x^T z >= 1/margin at every possible jump."""
    pts = _support_array(support)
    if margin is not None and margin < 1:
        raise ValueError("margin must be a positive integer")
    if pts.shape[0] == 0:
        d = pts.shape[1] if pts.ndim == 2 else 1
        return Region(np.zeros((0, d)), margin, float("inf"), True)
    if radius is None:
        try:
            radius = check_nondegeneracy(pts).kappa_nd
        except DegenerateSupport:
            radius = float("inf")
    return Region(pts, margin, float(radius), False)
