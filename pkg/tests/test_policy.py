import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from robustci.errors import BoundsViolation, DomainError, MismatchError, RangeViolation
from robustci.kernels import cara_global_value, crra_global_value
from robustci.market import UtilitySpec
from robustci.paths import FunctionPath, StepPath
from robustci.policy import (
    check_hjb_containment,
    consumption_bracket,
    consumption_range_check,
    global_value,
    global_value_closed_form,
    hjb_bounds,
    optimal_consumption_crra,
    optimal_excess_consumption_cara,
    q_schedule,
    solve_ode_cara,
    solve_riccati_crra,
    value_function,
    value_path_from_consumption,
    value_path_from_excess,
)

# independent mpmath evaluations (30 digits) of the worked constants
C0_POW_M1_006 = 0.51135347504  # (e^k + (e^k - 1)/k)^-1 with k = -0.03
G_POW_M1_006 = -2.8243495170
H_CARA_005 = -1.9016483014
U_CARA_005 = -2.0791218603  # e^{-1/3} (-1 + H)
VMIN_CARA_005 = -6.7571289784  # 1 - 3 e^{0.95}

G006 = StepPath.constant(0.06, 1.0)
H005 = StepPath.constant(0.05, 2.0)


def test_q_schedule_examples():
    assert q_schedule(2.0, 2.0) == 1.0
    assert q_schedule(0.0, 2.0) == pytest.approx(1 / 3)
    # q_0 = exp(-int_0^T q_s ds)
    ts = np.linspace(0, 2, 200_001)
    integral = np.trapezoid(q_schedule(ts, 2.0), ts) if hasattr(np, "trapezoid") else np.trapz(q_schedule(ts, 2.0), ts)
    assert np.exp(-integral) == pytest.approx(1 / 3, abs=1e-9)
    with pytest.raises(ValueError):
        q_schedule(3.0, 2.0)


# ---------------------------------------------------------------------------
# consumption


def test_log_consumption_exact_on_grid():
    g = StepPath(np.linspace(0, 2, 5), [0.1, -0.2, 0.0, 0.3])
    c = optimal_consumption_crra(g, 0.0)
    ts, cs = c.sample(2)
    assert np.array_equal(cs, 1.0 / (2.0 - ts + 1.0))
    assert c(0.0) == 1 / 3 and c(2.0) == 1.0


def test_power_consumption_examples():
    c = optimal_consumption_crra(G006, -1.0)
    k = -0.03
    assert c(0.0) == pytest.approx(1.0 / (np.exp(k) + np.expm1(k) / k), abs=1e-14)
    assert c(0.0) == pytest.approx(C0_POW_M1_006, abs=1e-10)
    assert c(0.0) == pytest.approx(0.5113534, abs=1e-7)
    for p in (-2.0, -1.0, 0.3, 0.0):
        assert optimal_consumption_crra(G006, p)(1.0) == 1.0


def test_consumption_range_examples():
    lo, hi = consumption_bracket(0.06, 0.06, -1.0)
    assert (lo, hi) == (pytest.approx(0.03), 1.0)
    c = optimal_consumption_crra(G006, -1.0)
    assert consumption_range_check(c, G006, -1.0)
    assert consumption_range_check(optimal_consumption_crra(G006, 0.0), G006, 0.0)
    ts, cs = c.sample(2)
    cs = cs.copy()
    cs[5] = 1.2
    with pytest.raises(RangeViolation) as err:
        consumption_range_check((ts, cs), G006, -1.0)
    assert err.value.t == pytest.approx(ts[5]) and err.value.value == 1.2
    # without the saddle restriction the bracket's top is max(-p g/(1-p), 1)
    assert consumption_range_check((ts, np.minimum(cs, 1.0)), G006, -1.0, at_saddle=False)


def test_consumption_monotone_for_constant_kernel():
    for p in (-2.0, -1.0, 0.3, 0.7):
        _, cs = optimal_consumption_crra(StepPath.constant(0.1, 2.0), p).sample(8)
        assert np.all(np.diff(cs) > 0)


def test_consumption_non_monotone_for_step_kernel():
    g = StepPath([0.0, 1.0, 2.0], [2.0, 0.0])
    _, cs = optimal_consumption_crra(g, -1.0).sample(8)
    d = np.diff(cs)
    assert np.any(d < 0) and np.any(d > 0)
    assert consumption_range_check(optimal_consumption_crra(g, -1.0), g, -1.0)


def test_cara_excess_consumption_examples():
    D = optimal_excess_consumption_cara(H005)
    assert D(2.0) == 0.0
    assert D(0.0) == pytest.approx(0.1 / 3, abs=1e-15)
    assert D(1.0) == pytest.approx(0.025, abs=1e-15)


# ---------------------------------------------------------------------------
# global values


def test_global_value_examples():
    assert global_value(G006, UtilitySpec.log()) == pytest.approx(0.09 - 2 * np.log(2), abs=1e-14)
    assert global_value(G006, UtilitySpec.power(-1.0)) == pytest.approx(G_POW_M1_006, abs=1e-9)
    assert global_value(H005, UtilitySpec.cara(1.0)) == pytest.approx(H_CARA_005, abs=1e-9)
    # A^{1-p}/p - 1/p with A = Phi(0) = 1/c*_0
    A = 1.0 / C0_POW_M1_006
    assert A == pytest.approx(1.9555944, abs=1e-7)
    assert -(A**2) + 1 == pytest.approx(G_POW_M1_006, abs=1e-9)


@pytest.mark.parametrize("utility", [UtilitySpec.log(), UtilitySpec.power(-1.0), UtilitySpec.power(0.5)])
def test_global_value_closed_form_matches_direct(utility):
    g = StepPath([0.0, 0.3, 1.0, 1.5], [0.05, -0.03, 0.12])
    c = optimal_consumption_crra(g, utility.p)
    direct = crra_global_value(g, c, utility.p)
    assert global_value(g, utility, consumption=c) == pytest.approx(direct, abs=1e-8)
    with pytest.raises(MismatchError):
        global_value(g, utility, consumption=FunctionPath(g.edges, lambda t: 0.9 * c(t)))


def test_cara_global_value_closed_form_matches_direct():
    h = StepPath([0.0, 0.5, 2.0], [0.05, 0.02])
    D = optimal_excess_consumption_cara(h)
    u = UtilitySpec.cara(2.0)
    assert global_value(h, u, consumption=D) == pytest.approx(cara_global_value(h, D, 2.0), abs=1e-10)


def test_value_function_examples():
    assert value_function(2.0, 0.09 - 2 * np.log(2), UtilitySpec.log(), 1.0) == pytest.approx(0.09, abs=1e-14)
    assert value_function(1.0, H_CARA_005, UtilitySpec.cara(1.0), 2.0) == pytest.approx(U_CARA_005, abs=1e-9)
    assert value_function(1.0, G_POW_M1_006, UtilitySpec.power(-1.0), 1.0) == pytest.approx(-3.8243495170, abs=1e-9)
    with pytest.raises(DomainError):
        value_function(0.0, 0.0, UtilitySpec.power(-1.0), 1.0)
    assert np.isfinite(value_function(-1.0, 0.0, UtilitySpec.cara(1.0), 1.0))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**6), st.sampled_from([-1.0, 0.5]))
def test_optimal_consumption_beats_perturbations(seed, p):
    rng = np.random.default_rng(seed)
    g = StepPath([0.0, 0.5, 1.0], rng.uniform(-0.1, 0.2, 2))
    c = optimal_consumption_crra(g, p)
    best = crra_global_value(g, c, p)
    bump = rng.uniform(-0.3, 0.3, 2)
    other = FunctionPath(g.edges, lambda t: np.clip(c(t) * (1 + np.where(t < 0.5, bump[0], bump[1])), 1e-3, None))
    assert crra_global_value(g, other, p) <= best + 1e-12
    # a lower kernel (worse measure) lowers the value at fixed consumption
    assert crra_global_value(StepPath(g.edges, g.values - 0.02), c, p) <= best


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**6), st.floats(0.3, 3.0))
def test_optimal_excess_consumption_beats_perturbations(seed, a):
    rng = np.random.default_rng(seed)
    h = StepPath([0.0, 1.0, 2.0], rng.uniform(0.0, 0.2, 2))
    D = optimal_excess_consumption_cara(h)
    best = cara_global_value(h, D, a)
    shift = rng.uniform(-0.2, 0.2)
    assert cara_global_value(h, FunctionPath(h.edges, lambda t: D(t) + shift), a) <= best + 1e-12


# ---------------------------------------------------------------------------
# backward ODEs


def test_riccati_examples():
    for p in (-1.0, 0.5):
        ts, cs = solve_riccati_crra(StepPath.constant(0.0, 1.0), p, 1e-3)
        assert cs[-1] == 1.0 and ts[-1] == 1.0 and ts[0] == 0.0
        assert np.max(np.abs(cs - 1.0 / (2.0 - ts))) < 1e-8
    ts, cs = solve_riccati_crra(G006, -1.0, 1e-3)
    assert abs(cs[0] - C0_POW_M1_006) < 1e-6


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10**6), st.sampled_from([-2.0, -1.0, -0.5, 0.3, 0.7]))
def test_riccati_matches_closed_form(seed, p):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 6))
    g = StepPath(np.linspace(0.0, 1.0, n + 1), rng.uniform(-0.2, 0.2, n))
    ts, cs = solve_riccati_crra(g, p, 1e-3)
    assert np.max(np.abs(cs - optimal_consumption_crra(g, p)(ts))) <= 1e-6


def test_cara_ode_examples():
    ts, Ds = solve_ode_cara(StepPath.constant(0.0, 2.0), 1e-3)
    assert np.all(Ds == 0.0)
    ts, Ds = solve_ode_cara(H005, 1e-3)
    assert abs(Ds[0] - 0.1 / 3) < 1e-6
    assert Ds[-1] == 0.0
    step = StepPath([0.0, 1.0, 2.0], [0.05, 0.02])
    ts, Ds = solve_ode_cara(step, 1e-3)
    assert abs(Ds[0] - 0.07 / 3) < 1e-6
    assert np.max(np.abs(Ds - optimal_excess_consumption_cara(step)(ts))) < 1e-6


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10**6))
def test_cara_ode_matches_closed_form(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 6))
    h = StepPath(np.linspace(0.0, 2.0, n + 1), rng.uniform(-0.2, 0.2, n))
    ts, Ds = solve_ode_cara(h, 1e-3)
    assert np.max(np.abs(Ds - optimal_excess_consumption_cara(h)(ts))) <= 1e-6


# ---------------------------------------------------------------------------
# HJB bounds


def test_hjb_bounds_examples():
    b = hjb_bounds(0.06, 0.06, UtilitySpec.power(-1.0), 1.0)
    assert b.v_max == 0.0
    assert b.v_min == pytest.approx(-(0.03**-2 - 1), rel=1e-14)
    assert b.v_min == pytest.approx(-1110.111, abs=1e-3)
    assert b.contains(G_POW_M1_006)
    b = hjb_bounds(0.05, 0.05, UtilitySpec.cara(1.0), 2.0)
    assert b.v_max == 0.0
    assert b.v_min == pytest.approx(VMIN_CARA_005, abs=1e-9)
    assert b.contains(H_CARA_005)
    assert hjb_bounds(2.5, 3.0, UtilitySpec.power(-1.0), 1.0).v_min == 0.0
    assert hjb_bounds(-0.1, 0.1, UtilitySpec.power(-1.0), 1.0).v_min == -np.inf
    with pytest.raises(ValueError):
        hjb_bounds(0.0, 0.1, UtilitySpec.log(), 1.0)


@pytest.mark.parametrize("p", [-2.0, -1.0, -0.5])
def test_hjb_containment_along_power_path(p):
    g = StepPath([0.0, 0.4, 1.0], [0.06, 0.02])
    ts, cs = optimal_consumption_crra(g, p).sample(4)
    v = value_path_from_consumption(cs, p)
    assert v[0] == pytest.approx(global_value(g, UtilitySpec.power(p)), abs=1e-12)
    assert check_hjb_containment(ts, v, hjb_bounds(g.min, g.max, UtilitySpec.power(p), 1.0), UtilitySpec.power(p))


def test_hjb_containment_along_cara_path():
    u = UtilitySpec.cara(1.0)
    ts, Ds = optimal_excess_consumption_cara(H005).sample(4)
    v = value_path_from_excess(ts, Ds, 1.0, 2.0)
    assert v[0] == pytest.approx(H_CARA_005, abs=1e-9)
    assert v[-1] == 0.0
    assert check_hjb_containment(ts, v, hjb_bounds(0.05, 0.05, u, 2.0), u)
    with pytest.raises(BoundsViolation):
        check_hjb_containment(ts, v - 10.0, hjb_bounds(0.05, 0.05, u, 2.0), u)
