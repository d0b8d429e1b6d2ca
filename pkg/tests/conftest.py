from pathlib import Path

import numpy as np
import pytest

from robustci.market import ConfidenceSet, DiscreteLevyMeasure, LevyTriplet, MarketSpec, TimeGrid, UtilitySpec

ROOT = Path(__file__).resolve().parents[1]
FIXTURES = ROOT / "docs" / "fixtures"


def trip(b, cov, atoms=()):
    """Triplet from a drift, a covariance (scalar allowed in d = 1) and (z, w) atoms."""
    b = np.atleast_1d(np.asarray(b, float))
    d = b.size
    cov = np.asarray(cov, float).reshape(d, d)
    return LevyTriplet(b, cov, DiscreteLevyMeasure.from_atoms(list(atoms), d))


def cset(*vertices, kappa=None):
    return ConfidenceSet(tuple(vertices), kappa)


def market(sets, utility, *, T=1.0, step=0.01, breakpoints=None, w0=1.0, epsilon=2.0):
    bps = breakpoints if breakpoints is not None else (0.0, T)
    return MarketSpec(TimeGrid(T, tuple(bps), step), tuple(sets), utility, w0, epsilon)


MERTON = trip(0.08, 0.04)
DRIFT_HULL = cset(trip(0.05, 0.04), trip(0.10, 0.04))
VOL_HULL = cset(trip(0.08, 0.04), trip(0.08, 0.09))


@pytest.fixture
def fixtures_dir():
    return FIXTURES


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def _ray_peak(f, hi):
    """Maximizer of a concave scalar function on [0, hi] by golden-section search."""
    from scipy.optimize import minimize_scalar

    return float(minimize_scalar(lambda x: -f(x), bounds=(0.0, hi), method="bounded",
                                 options={"xatol": 1e-10}).x)


def dominating_case(seed, utility):
    """Random grid and two (investment, triplet path) pairs, the first dominating cell by cell.

    Each cell either keeps the triplet and moves the position towards 0 from
    below the kernel's peak (concavity), or keeps a position x >= 0 and lowers
    the drift.  Drifts and variances keep the Sharpe ratio below 0.6.
    """
    from robustci.kernels import TripletPath, local_kernel_cara, local_kernel_crra
    from robustci.market import TimeGrid

    rng = np.random.default_rng(seed)
    T = float(rng.uniform(0.5, 3.0))
    n = int(rng.integers(2, 6))
    grid = TimeGrid(T, (0.0, T), T / n)
    x1, x2, th1, th2 = np.empty(n), np.empty(n), [], []
    for k in range(n):
        s = rng.uniform(0.02, 0.09)
        b = rng.uniform(0.0, 0.5) * np.sqrt(s)
        atoms = [a for a in ((-0.1, rng.uniform(0, 0.5)), (0.15, rng.uniform(0, 0.5))) if a[1] > 0.01]
        lo = trip(b, s, atoms)
        hi = trip(b + rng.uniform(0, 0.1) * np.sqrt(s), s, atoms)
        if utility.is_crra:
            peak = _ray_peak(lambda x: local_kernel_crra(x, lo, utility.p), 9.0)
        else:
            # q <= 1 on the whole horizon, so the q = 1 peak lies below every h_t peak
            peak = _ray_peak(lambda x: local_kernel_cara(x, lo, 1.0, utility.a), 50.0)
        x = rng.uniform(0.0, 1.0) * peak
        if rng.uniform() < 0.5:
            x1[k], x2[k] = x, x * rng.uniform()
            th1.append(lo)
            th2.append(lo)
        else:
            x1[k] = x2[k] = x
            th1.append(hi)
            th2.append(lo)
    return rng, grid, (x1, TripletPath(th1)), (x2, TripletPath(th2))


# ---------------------------------------------------------------------------
# acceptance report

ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
