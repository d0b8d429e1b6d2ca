"""Bounded-Hoelder (Kantorovich-Rubinshtein) distance between discrete Levy measures.

The distance between two atom lists reduces to a finite LP over the
values of the test function at the union of the atoms.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np
from numpy.typing import ArrayLike
from scipy.optimize import linprog

from .errors import DomainError, LPFailure, ValidationError
from .market import DiscreteLevyMeasure


@dataclass(frozen=True)
class MetricConfig:
    epsilon: float = 2.0
    tol: float = 1e-9

    def __post_init__(self):
        if not 0.0 < self.epsilon <= 2.0:
            raise ValidationError("epsilon must lie in (0, 2]")
        if not self.tol > 0:
            raise ValidationError("LP tolerance must be positive")

    @property
    def holder_exponent(self) -> float:
        return min(self.epsilon, 1.0)


def _weight_factor(z: np.ndarray, epsilon: float) -> np.ndarray:
    """|z|^(2-eps) ^ 1, row-wise."""
    r = np.linalg.norm(np.atleast_2d(z), axis=1)
    return np.minimum(r ** (2.0 - epsilon), 1.0)


def weighted_measure(mu: DiscreteLevyMeasure, epsilon: float) -> DiscreteLevyMeasure:
    """Same atoms with intensities scaled by |z|^(2-eps) ^ 1."""
    if mu.n_atoms == 0:
        return mu
    w = mu.intensities * _weight_factor(mu.locations, epsilon)
    keep = w > 0  # atoms whose weighted mass underflows carry nothing
    return DiscreteLevyMeasure(mu.locations[keep], w[keep])


def _mass_on_union(mu: DiscreteLevyMeasure, nu: DiscreteLevyMeasure):
    d = mu.dim
    pts = np.vstack([mu.locations, nu.locations]).reshape(-1, d)
    union, inv = np.unique(pts, axis=0, return_inverse=True)
    inv = np.asarray(inv).reshape(-1)
    a = np.zeros(union.shape[0])
    b = np.zeros(union.shape[0])
    np.add.at(a, inv[: mu.n_atoms], mu.intensities)
    np.add.at(b, inv[mu.n_atoms :], nu.intensities)
    return union, a, b


def kr_distance(mu: DiscreteLevyMeasure, nu: DiscreteLevyMeasure, cfg: MetricConfig | None = None) -> float:
    """d_L^eps(mu, nu): sup of int f d(mu~ - nu~) over |f| <= 1 with (eps ^ 1)-Hoelder seminorm <= 1.

    Solved as an LP in the values f_i at the atom union (HiGHS).
    """
    cfg = cfg or MetricConfig()
    if mu.dim != nu.dim:
        raise ValidationError("measures live in different dimensions")
    mu_w = weighted_measure(mu, cfg.epsilon)
    nu_w = weighted_measure(nu, cfg.epsilon)
    union, a, b = _mass_on_union(mu_w, nu_w)
    c = a - b
    m = c.size
    if m == 0 or np.all(c == 0.0):
        return 0.0
    if m == 1:
        return float(abs(c[0]))
    diff = union[:, None, :] - union[None, :, :]
    rho = np.linalg.norm(diff, axis=2) ** cfg.holder_exponent
    ii, jj = np.nonzero(~np.eye(m, dtype=bool))
    A = np.zeros((ii.size, m))
    A[np.arange(ii.size), ii] = 1.0
    A[np.arange(ii.size), jj] = -1.0
    res = linprog(
        -c,
        A_ub=A,
        b_ub=rho[ii, jj],
        bounds=[(-1.0, 1.0)] * m,
        method="highs",
        options={"primal_feasibility_tolerance": cfg.tol, "dual_feasibility_tolerance": cfg.tol},
    )
    if res.status != 0:
        raise LPFailure(f"metric LP failed: {res.message}")
    return max(float(-res.fun), 0.0)


def integrand_I(z: ArrayLike, x: ArrayLike, p: float, epsilon: float) -> float:
    """[ ((1 + x.z)^p - 1)/p - x.z ] / (|z|^(2-eps) ^ 1), log limit at p = 0, zero at z = 0."""
    z = np.atleast_1d(np.asarray(z, dtype=float))
    x = np.atleast_1d(np.asarray(x, dtype=float))
    r = float(np.linalg.norm(z))
    if r == 0.0:
        return 0.0
    s = float(x @ z)
    y = 1.0 + s
    if y <= 0.0 and (p <= 0.0 or y < 0.0):
        raise DomainError(f"1 + x.z = {y} outside the utility domain")
    if p == 0.0:
        num = np.log1p(s) - s
    else:
        num = np.expm1(p * np.log1p(s)) / p - s if y > 0 else -1.0 / p - s
    return float(num / min(r ** (2.0 - epsilon), 1.0))


def holder_modulus(xs: ArrayLike, zs: Iterable[tuple[ArrayLike, ArrayLike]], p: float, epsilon: float) -> float:
    """Empirical sup of |I(z,x) - I(z',x)| / |z - z'|^(eps ^ 1) over the samples; coincident pairs skipped."""
    alpha = min(epsilon, 1.0)
    pairs = [(np.atleast_1d(np.asarray(z, float)), np.atleast_1d(np.asarray(w, float))) for z, w in zs]
    if not pairs:
        return 0.0
    xs = np.asarray(xs, dtype=float).reshape(-1, pairs[0][0].size)
    best = 0.0
    for x in xs:
        for z, w in pairs:
            dist = float(np.linalg.norm(z - w))
            if dist == 0.0:
                continue
            ratio = abs(integrand_I(z, x, p, epsilon) - integrand_I(w, x, p, epsilon)) / dist**alpha
            best = max(best, ratio)
    return best


def integrand_sup(xs: ArrayLike, zs: ArrayLike, p: float, epsilon: float) -> float:
    """Empirical sup of |I(z, x)| over a sample grid."""
    zs = np.asarray(zs, dtype=float)
    zs = zs.reshape(-1, 1) if zs.ndim <= 1 else zs
    xs = np.asarray(xs, dtype=float).reshape(-1, zs.shape[1])
    return max((abs(integrand_I(z, x, p, epsilon)) for x in xs for z in zs), default=0.0)


def kernel_jump_gap(mu: DiscreteLevyMeasure, nu: DiscreteLevyMeasure, x: ArrayLike, p: float, epsilon: float) -> float:
    """|int I(z,x) d(mu~ - nu~)|, the jump-part difference of two local kernels at x."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    tot = 0.0
    for meas, sign in ((weighted_measure(mu, epsilon), 1.0), (weighted_measure(nu, epsilon), -1.0)):
        for z, w in zip(meas.locations, meas.intensities):
            tot += sign * w * integrand_I(z, x, p, epsilon)
    return abs(tot)
