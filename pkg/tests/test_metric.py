import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import linprog

from robustci.errors import DomainError, ValidationError
from robustci.market import DiscreteLevyMeasure
from robustci.metric import (
    MetricConfig,
    holder_modulus,
    integrand_I,
    integrand_sup,
    kernel_jump_gap,
    kr_distance,
    weighted_measure,
)

LP_TOL = MetricConfig().tol


def meas(*atoms, d=1):
    return DiscreteLevyMeasure.from_atoms(list(atoms), d)


def flow_oracle(mu, nu, eps):
    """Dual of the bounded-Hoelder LP: move mass between atoms at cost |z - z'|^(eps ^ 1),
    create or destroy it at unit cost."""
    d = mu.dim
    pts, a, b = [], [], []
    for m, sign in ((mu, 1.0), (nu, -1.0)):
        wm = m.intensities * np.minimum(np.linalg.norm(m.locations, axis=1) ** (2 - eps), 1.0)
        for z, w in zip(m.locations, wm):
            pts.append(tuple(z))
            a.append(sign * w)
    keys = sorted(set(pts))
    c = np.zeros(len(keys))
    for z, w in zip(pts, a):
        c[keys.index(z)] += w
    n = len(keys)
    if n == 0:
        return 0.0
    P = np.array(keys).reshape(n, d)
    arcs = [(i, j) for i in range(n) for j in range(n) if i != j]
    cost = [np.linalg.norm(P[i] - P[j]) ** min(eps, 1.0) for i, j in arcs] + [1.0] * (2 * n)
    A = np.zeros((n, len(arcs) + 2 * n))
    for k, (i, j) in enumerate(arcs):
        A[i, k] += 1.0
        A[j, k] -= 1.0
    A[:, len(arcs):len(arcs) + n] = np.eye(n)
    A[:, len(arcs) + n:] = -np.eye(n)
    res = linprog(cost, A_eq=A, b_eq=c, bounds=(0, None), method="highs")
    assert res.status == 0
    return float(res.fun)


def random_measure(rng, d, k, pool):
    idx = rng.choice(len(pool), size=k, replace=False)
    return DiscreteLevyMeasure(pool[idx], rng.uniform(0.1, 2.0, size=k))


def test_weighted_measure_examples():
    mu = meas((0.5, 1.0), (3.0, 2.0))
    assert np.allclose(weighted_measure(mu, 2.0).intensities, [1.0, 2.0])
    assert np.allclose(weighted_measure(mu, 1.0).intensities, [0.5, 2.0])


def test_kr_distance_examples():
    cfg = MetricConfig(epsilon=1.0)
    assert kr_distance(meas((0.5, 1.0)), meas((0.6, 1.0)), cfg) == pytest.approx(0.15, abs=1e-12)
    assert kr_distance(meas((1.0, 1.0)), meas((1.0, 2.0)), cfg) == pytest.approx(1.0, abs=1e-12)
    mu = meas((0.5, 1.0), (-0.2, 0.7))
    assert kr_distance(mu, mu, cfg) == 0.0
    assert kr_distance(meas(), meas(), cfg) == 0.0
    with pytest.raises(ValidationError):
        kr_distance(meas((0.1, 1.0)), meas(((0.1, 0.1), 1.0), d=2))


@pytest.mark.parametrize("eps", [0.5, 1.0, 1.5, 2.0])
def test_kr_distance_matches_flow_oracle(eps):
    rng = np.random.default_rng(7)
    pool = rng.uniform(-1.5, 1.5, size=(12, 2))
    pool = pool[np.linalg.norm(pool, axis=1) > 0]
    cfg = MetricConfig(epsilon=eps)
    for _ in range(20):
        mu = random_measure(rng, 2, int(rng.integers(1, 5)), pool)
        nu = random_measure(rng, 2, int(rng.integers(1, 5)), pool)
        assert kr_distance(mu, nu, cfg) == pytest.approx(flow_oracle(mu, nu, eps), abs=1e-8)


@settings(max_examples=25, deadline=None)
@given(st.floats(0.05, 2.0), st.floats(-1.0, 1.0), st.floats(0.0, 2.0), st.sampled_from([0.5, 1.0, 2.0]))
def test_equal_mass_single_atoms_transport_only(m, z, gap, eps):
    zh = z + gap
    if min(abs(z), abs(zh), gap) < 1e-3:
        return
    # equal weighted mass at both atoms
    wz = m / min(abs(z) ** (2 - eps), 1.0)
    wzh = m / min(abs(zh) ** (2 - eps), 1.0)
    d = kr_distance(meas((z, wz)), meas((zh, wzh)), MetricConfig(epsilon=eps))
    assert d == pytest.approx(m * gap ** min(eps, 1.0), rel=1e-7, abs=1e-9)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10**6), st.sampled_from([0.5, 1.0, 2.0]))
def test_kr_is_pseudometric(seed, eps):
    rng = np.random.default_rng(seed)
    pool = rng.uniform(-1, 1, size=(8, 1))
    pool = pool[pool[:, 0] != 0]
    cfg = MetricConfig(epsilon=eps)
    m1, m2, m3 = (random_measure(rng, 1, int(rng.integers(1, 4)), pool) for _ in range(3))
    d12, d21 = kr_distance(m1, m2, cfg), kr_distance(m2, m1, cfg)
    d13, d23 = kr_distance(m1, m3, cfg), kr_distance(m2, m3, cfg)
    assert d12 >= 0 and abs(d12 - d21) <= 2 * LP_TOL
    assert d13 <= d12 + d23 + 2 * LP_TOL
    assert kr_distance(m1, m1, cfg) == 0.0


def test_integrand_examples():
    assert integrand_I(0.0, 1.0, -1.0, 1.0) == 0.0
    assert integrand_I(1.0, 1.0, -1.0, 1.0) == pytest.approx(-0.5)
    assert integrand_I(-0.5, 1.0, -1.0, 1.0) == pytest.approx(-1.0)
    # log case is the analytic limit
    assert integrand_I(0.3, 1.0, 0.0, 2.0) == pytest.approx(np.log(1.3) - 0.3)
    assert integrand_I(0.3, 1.0, 1e-9, 2.0) == pytest.approx(np.log(1.3) - 0.3, abs=1e-8)
    with pytest.raises(DomainError):
        integrand_I(-1.0, 1.0, -1.0, 1.0)
    with pytest.raises(DomainError):
        integrand_I(-1.0, 1.0, 0.0, 1.0)
    # p > 0 is defined at the boundary 1 + x.z = 0
    assert integrand_I(-1.0, 1.0, 0.5, 2.0) == pytest.approx(-2.0 + 1.0)


def test_holder_modulus_examples():
    assert holder_modulus([1.0], [(1.0, -0.5)], -1.0, 1.0) == pytest.approx(1 / 3)
    assert holder_modulus([1.0], [(0.3, 0.3)], -1.0, 1.0) == 0.0
    zs = np.linspace(-0.5, 1.0, 7)
    coarse = holder_modulus([0.5, 1.0], list(itertools.combinations(zs, 2)), -1.0, 1.0)
    fine_z = np.linspace(-0.5, 1.0, 13)
    fine = holder_modulus([0.5, 1.0], list(itertools.combinations(fine_z, 2)), -1.0, 1.0)
    assert fine >= coarse


def test_integrand_bounded_under_refinement():
    zs = np.linspace(-0.2, 0.3, 21)
    xs = np.linspace(-3.0, 3.0, 11)
    a = integrand_sup(xs, zs, -1.0, 2.0)
    b = integrand_sup(np.linspace(-3.0, 3.0, 41), np.linspace(-0.2, 0.3, 81), -1.0, 2.0)
    assert np.isfinite(a) and np.isfinite(b)
    assert a <= b <= 1.05 * a


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**6), st.sampled_from([0.5, 1.0, 2.0]), st.sampled_from([-1.0, 0.0, 0.5]))
def test_kernel_gap_bounded_by_modulus_times_distance(seed, eps, p):
    rng = np.random.default_rng(seed)
    pool = rng.uniform(-0.3, 0.3, size=(6, 1))
    pool = pool[pool[:, 0] != 0]
    mu = random_measure(rng, 1, int(rng.integers(1, 4)), pool)
    nu = random_measure(rng, 1, int(rng.integers(1, 4)), pool)
    x = rng.uniform(-2.0, 2.0)
    union = np.unique(np.vstack([mu.locations, nu.locations]), axis=0)
    pairs = list(itertools.combinations(union, 2))
    # I(., x) / C is a valid test function once C covers both the sup and the Hoelder constant
    C = max(holder_modulus([x], pairs, p, eps), integrand_sup([x], union, p, eps))
    gap = kernel_jump_gap(mu, nu, [x], p, eps)
    assert gap <= C * kr_distance(mu, nu, MetricConfig(epsilon=eps)) + 1e-9 * max(1.0, C)
