"""Optimal consumption, global values, value functions and the backward-ODE checks.

Given a kernel path (g for CRRA, h for CARA) the optimal consumption and
the optimal global value have closed forms.  The Riccati and linear
backward ODEs are integrated independently with fixed-step RK4 and serve
as the cross-check.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .errors import BoundsViolation, DomainError, MismatchError, RangeViolation, StepRejection
from .kernels import PolicyPath, TripletPath, cara_global_value, crra_global_value, phi1, q_of
from .market import UtilitySpec
from .paths import FunctionPath, StepPath, TimePath, gauss_legendre, refine_edges


def q_schedule(t, T: float):
    """(T - t + 1)^{-1}."""
    t_arr = np.asarray(t, dtype=float)
    if np.any(t_arr < 0) or np.any(t_arr > T * (1 + 1e-12)):
        raise ValueError("need 0 <= t <= T")
    out = q_of(t_arr, T)
    return float(out) if out.ndim == 0 else out


# ---------------------------------------------------------------------------
# CRRA consumption


def _phi_nodes(g: StepPath, p: float) -> tuple[np.ndarray, np.ndarray]:
    """k = p g/(1-p) per cell and Phi at the cell edges, Phi(T) = 1, Phi' = -k Phi - 1."""
    k = p * g.values / (1.0 - p)
    L = np.diff(g.edges)
    Phi = np.empty(g.edges.size)
    Phi[-1] = 1.0
    for j in range(k.size - 1, -1, -1):
        Phi[j] = np.exp(k[j] * L[j]) * Phi[j + 1] + L[j] * phi1(k[j] * L[j])
    return k, Phi


def consumption_potential(g: StepPath, p: float):
    """Phi(t) with c*_t = 1/Phi(t) for power utility; vectorized callable."""
    k, Phi = _phi_nodes(g, p)
    edges = g.edges

    def phi(t):
        t = np.asarray(t, dtype=float)
        j = np.clip(np.searchsorted(edges, t, side="right") - 1, 0, k.size - 1)
        tau = edges[j + 1] - t
        return np.exp(k[j] * tau) * Phi[j + 1] + tau * phi1(k[j] * tau)

    return phi


def optimal_consumption_crra(g: TimePath, p: float, T: float | None = None) -> FunctionPath:
    """c*_t: (T-t+1)^{-1} for log utility, 1/Phi(t) for power utility."""
    T = g.horizon if T is None else T
    if p == 0.0:
        return FunctionPath(g.edges, lambda t: q_of(t, T))
    if not g.is_step:
        raise ValueError("power-utility consumption needs a piecewise-constant kernel path")
    phi = consumption_potential(g, p)
    return FunctionPath(g.edges, lambda t: 1.0 / phi(t))


def consumption_bracket(g_min: float, g_max: float, p: float) -> tuple[float, float]:
    """Interval that must contain c*_t given the kernel extremes."""
    lo_g, hi_g = (g_max, g_min) if p > 0 else (g_min, g_max)
    lo = min(max(-p * lo_g / (1.0 - p), 0.0), 1.0)
    hi = max(-p * hi_g / (1.0 - p), 1.0)
    return lo, hi


def consumption_range_check(c, g: TimePath, p: float, *, at_saddle: bool = True, tol: float = 1e-12) -> bool:
    """Raise RangeViolation unless every sampled c_t lies in the bracket (and c_t <= 1 at a saddle).

    ``c`` is a TimePath or a pair (times, values).
    """
    if isinstance(c, TimePath):
        ts, cs = c.sample(2)
    else:
        ts, cs = (np.asarray(v, dtype=float) for v in c)
    gmin, gmax = (g.min, g.max)
    lo, hi = consumption_bracket(gmin, gmax, p)
    if at_saddle:
        hi = min(hi, 1.0)
    bad = np.nonzero((cs < lo - tol) | (cs > hi + tol))[0]
    if bad.size:
        i = int(bad[0])
        raise RangeViolation(
            f"c*({ts[i]:.6g}) = {float(cs[i])!r} outside [{float(lo) + 0.0!r}, {float(hi)!r}]", t=float(ts[i]), value=float(cs[i])
        )
    return True


# ---------------------------------------------------------------------------
# CARA excess consumption


def optimal_excess_consumption_cara(h: TimePath, T: float | None = None) -> TimePath:
    """D*_t = q_t int_t^T h_s ds."""
    T = h.horizon if T is None else T
    total = float(h.antiderivative(T))
    return FunctionPath(h.edges, lambda t: q_of(t, T) * (total - h.antiderivative(t)))


# ---------------------------------------------------------------------------
# global value and value function


def _integral_of_antiderivative(g: TimePath) -> float:
    """int_0^T int_0^t g ds dt."""
    if g.is_step:
        G = g.antiderivative(g.edges)
        return float(np.sum(0.5 * (G[:-1] + G[1:]) * np.diff(g.edges)))
    edges = refine_edges(g.edges)
    xi, wi = gauss_legendre()
    L = np.diff(edges)
    t = edges[:-1, None] + L[:, None] * xi
    return float(np.sum((g.antiderivative(t) * wi).sum(axis=1) * L))


def global_value_closed_form(kernel: TimePath, utility: UtilitySpec) -> float:
    T = kernel.horizon
    if utility.family == "crra-log":
        return _integral_of_antiderivative(kernel) + float(kernel.antiderivative(T)) - (T + 1.0) * np.log(T + 1.0)
    if utility.family == "crra-power":
        p = utility.p
        Phi0 = float(consumption_potential(kernel, p)(0.0))
        return Phi0 ** (1.0 - p) / p - 1.0 / p
    a = utility.a
    return (1.0 - (T + 1.0) * np.exp(-a * float(kernel.antiderivative(T)) / (T + 1.0))) / a


def global_value(kernel: TimePath, utility: UtilitySpec, *, consumption: TimePath | None = None,
                 tol: float = 1e-8) -> float:
    """Optimal G (or H) for the kernel path; when ``consumption`` is given, cross-check directly."""
    closed = global_value_closed_form(kernel, utility)
    if consumption is not None:
        if utility.is_crra:
            direct = crra_global_value(kernel, consumption, utility.p)
        else:
            direct = cara_global_value(kernel, consumption, utility.a)
        if abs(direct - closed) > tol * max(1.0, abs(closed)):
            raise MismatchError(f"closed form {float(closed)!r} vs direct evaluation {float(direct)!r}")
    return closed


def value_function(w0: float, gval: float, utility: UtilitySpec, T: float) -> float:
    if utility.family == "crra-log":
        if w0 <= 0:
            raise DomainError("log utility needs w0 > 0")
        return (T + 1.0) * np.log(w0) + gval
    if utility.family == "crra-power":
        if w0 <= 0:
            raise DomainError("power utility needs w0 > 0")
        wp = w0**utility.p
        return wp / utility.p + wp * gval
    a = utility.a
    return float(np.exp(-a * w0 / (T + 1.0)) * (-1.0 / a + gval))


# ---------------------------------------------------------------------------
# backward ODEs


def _backward_times(edges: np.ndarray, step: float) -> np.ndarray:
    """Time nodes from T down to 0, aligned to ``edges``, spacing at most ``step``."""
    out = [edges[-1]]
    for a, b in zip(edges[-2::-1], edges[:0:-1]):
        n = max(1, int(np.ceil((b - a) / step - 1e-9)))
        out.extend(np.linspace(b, a, n + 1)[1:].tolist())
    return np.array(out)


def _rk4_backward(f, ts: np.ndarray, y_end: float, check=None) -> np.ndarray:
    """Integrate y' = f(t, y) from ts[0] (terminal) over the decreasing nodes ts.

    The right-hand side is evaluated strictly inside each step so that
    piecewise definitions pick the cell the step belongs to.
    """
    ys = np.empty(ts.size)
    ys[0] = y = y_end
    for i in range(1, ts.size):
        t0, t1 = ts[i - 1], ts[i]
        h = t1 - t0
        k1 = f(t0 + 1e-9 * h, y)
        k2 = f(t0 + 0.5 * h, y + 0.5 * h * k1)
        k3 = f(t0 + 0.5 * h, y + 0.5 * h * k2)
        k4 = f(t1 - 1e-9 * h, y + h * k3)
        y = y + h * (k1 + 2 * k2 + 2 * k3 + k4) / 6.0
        if check is not None:
            check(t1, y)
        ys[i] = y
    return ys


def solve_riccati_crra(g: TimePath, p: float, step: float = 1e-3) -> tuple[np.ndarray, np.ndarray]:
    """c' = (p g/(1-p)) c + c^2, c_T = 1, integrated backward; returns increasing (t, c)."""
    ts = _backward_times(g.edges, step)

    def f(t, c):
        return p * float(g(t)) / (1.0 - p) * c + c * c

    def check(t, c):
        if not (0.0 < c < np.inf):
            raise StepRejection(f"Riccati solution left (0, inf) at t={t}")

    cs = _rk4_backward(f, ts, 1.0, check)
    return ts[::-1].copy(), cs[::-1].copy()


def solve_ode_cara(h: TimePath, step: float = 1e-3) -> tuple[np.ndarray, np.ndarray]:
    """D' = q_t (D - h_t), D_T = 0, integrated backward; returns increasing (t, D)."""
    T = h.horizon
    ts = _backward_times(h.edges, step)

    def f(t, D):
        return float(q_of(t, T)) * (D - float(h(t)))

    def check(t, D):
        if not np.isfinite(D):
            raise StepRejection(f"excess-consumption ODE diverged at t={t}")

    Ds = _rk4_backward(f, ts, 0.0, check)
    return ts[::-1].copy(), Ds[::-1].copy()


# ---------------------------------------------------------------------------
# HJB bounds


@dataclass(frozen=True)
class HjbBounds:
    v_min: float
    v_max: float
    k_min: float
    k_max: float
    family: str

    def __post_init__(self):
        if not self.v_min <= self.v_max:
            raise BoundsViolation(f"V_min={self.v_min} exceeds V_max={self.v_max}")

    def contains(self, v, tol: float = 1e-9) -> bool:
        v = np.asarray(v, dtype=float)
        scale = np.maximum(1.0, np.abs(v))
        return bool(np.all((v >= self.v_min - tol * scale) & (v <= self.v_max + tol * scale)))


def hjb_bounds(k_min: float, k_max: float, utility: UtilitySpec, T: float) -> HjbBounds:
    """Range of the HJB solution V from the extremes of the kernel path (power and CARA only)."""
    if k_min > k_max:
        raise ValueError("need k_min <= k_max")
    if utility.family == "crra-log":
        raise ValueError("the HJB range is stated for power and exponential utilities only")
    if utility.family == "crra-power":
        p = utility.p
        thr = (1.0 - p) / (-p)

        def formula(g):
            return ((-p * g / (1.0 - p)) ** (p - 1.0) - 1.0) / p

        if k_min >= thr:
            vmin = 0.0
        elif p < 0 and k_min <= 0:
            vmin = -np.inf
        else:
            vmin = formula(k_min)
        if k_max <= thr:
            vmax = 0.0
        elif p > 0 and k_max >= 0:
            vmax = np.inf
        else:
            vmax = formula(k_max)
        return HjbBounds(float(vmin), float(vmax), k_min, k_max, utility.family)
    a = utility.a
    if k_min >= (1.0 + np.log(T + 1.0)) / a:
        vmin = 0.0
    else:
        vmin = (1.0 - (T + 1.0) * np.exp(1.0 - a * k_min)) / a
    vmax = (1.0 - np.exp(1.0 - a * k_max)) / a if k_max >= 1.0 / a else 0.0
    return HjbBounds(float(vmin), float(vmax), k_min, k_max, utility.family)


def value_path_from_consumption(cs, p: float):
    """V = (c^{p-1} - 1)/p."""
    cs = np.asarray(cs, dtype=float)
    return (cs ** (p - 1.0) - 1.0) / p


def value_path_from_excess(ts, Ds, a: float, T: float):
    """V = (1 - q^{-1} e^{-a D})/a."""
    ts = np.asarray(ts, dtype=float)
    return (1.0 - np.exp(-a * np.asarray(Ds, dtype=float)) / q_of(ts, T)) / a


def check_hjb_containment(ts, vs, bounds: HjbBounds, utility: UtilitySpec) -> bool:
    """Raise BoundsViolation unless V stays in range and 1 + pV > 0 (resp. 1 - aV > 0)."""
    vs = np.asarray(vs, dtype=float)
    if not bounds.contains(vs):
        i = int(np.argmax((vs < bounds.v_min) | (vs > bounds.v_max)))
        raise BoundsViolation(f"V({ts[i]:.6g}) = {float(vs[i])!r} outside [{float(bounds.v_min)!r}, {float(bounds.v_max)!r}]")
    pos = 1.0 + utility.p * vs if utility.is_crra else 1.0 - utility.a * vs
    if np.any(pos <= 0):
        raise BoundsViolation("HJB positivity condition fails along the value path")
    return True


# ---------------------------------------------------------------------------
# assembled solution


@dataclass
class SaddleSolution:
    """Optimal policy, worst-case triplet path, kernel path and values for a market spec."""

    utility: UtilitySpec
    w0: float
    edges: np.ndarray
    invest: np.ndarray
    theta: TripletPath
    kernel: TimePath
    consumption: TimePath
    global_value: float
    value: float
    cell_kernel: np.ndarray = None  # type: ignore[assignment]
    certificates: np.ndarray = None  # type: ignore[assignment]
    meta: dict[str, Any] = field(default_factory=dict)

    @property
    def horizon(self) -> float:
        return float(self.edges[-1])

    @property
    def policy(self) -> PolicyPath:
        kind = "crra" if self.utility.is_crra else "cara"
        return PolicyPath(kind, self.invest, self.consumption, self.edges)


def assemble_solution(utility: UtilitySpec, w0: float, edges, invest, theta: TripletPath, kernel: TimePath,
                      *, cell_kernel=None, certificates=None, check_tol: float = 1e-8) -> SaddleSolution:
    """Closed-form consumption and values for a given optimal kernel path."""
    T = float(np.asarray(edges)[-1])
    if utility.is_crra:
        cons = optimal_consumption_crra(kernel, utility.p, T)
    else:
        cons = optimal_excess_consumption_cara(kernel, T)
    gval = global_value(kernel, utility, consumption=cons, tol=check_tol)
    return SaddleSolution(
        utility, w0, np.asarray(edges, float), np.asarray(invest, float), theta, kernel, cons, gval,
        value_function(w0, gval, utility, T), cell_kernel, certificates,
    )
