"""Monte-Carlo estimation of the objective under a PII measure and the verification checks.

CRRA wealth is simulated in log space, CARA wealth through Y = q W; both
are exact at the grid nodes for piecewise-constant investment.  Every
path is split as (deterministic mean part) + (zero-mean martingale part).
The mean part is integrated in time by quadrature, the martingale part by
the trapezoid rule.  Paths are drawn in fixed-size blocks with one Philox
stream per (seed, block), so results do not depend on thread scheduling.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import Bankruptcy, EqualityViolation, SaddleViolation
from .kernels import PolicyPath, TripletPath, q_of
from .market import UtilitySpec
from .paths import FunctionPath, refine_edges

BLOCK = 8192
THREADS_ENV = "ROBUSTCI_THREADS"


@dataclass(frozen=True)
class BundleConfig:
    seed: int = 0
    n_paths: int = 10_000
    step: float = 1e-3
    antithetic: bool = False
    block: int = BLOCK

    def __post_init__(self):
        if self.n_paths < 2 or not self.step > 0 or self.block < 2:
            raise ValueError("need n_paths >= 2, step > 0 and block >= 2")
        if self.antithetic and (self.block % 2 or self.n_paths % 2):
            raise ValueError("antithetic sampling needs even path and block counts")


@dataclass
class SimResult:
    objective: np.ndarray
    terminal: np.ndarray  # log W_T (CRRA) or W_T (CARA)
    consumption_utility: np.ndarray  # int_0^T U(consumption) dt per path
    atoms: np.ndarray  # union of atom locations, (A, d)
    jump_counts: np.ndarray  # (N, A)
    expected_jumps: np.ndarray  # (A,)
    antithetic: bool = False


@dataclass(frozen=True)
class ObjectiveEstimate:
    mean: float
    se: float
    n: int
    seed: int
    step: float = float("nan")

    def z_score(self, target: float, resolution: float = 1e-9) -> float:
        """(mean - target)/se, with se floored at ``resolution * max(1, |target|)``.

        The floor absorbs quadrature round-off when the estimator has (near) zero
        variance, e.g. antithetic pairs under log utility.
        """
        se = max(self.se, resolution * max(1.0, abs(target)))
        return (self.mean - target) / se


def _threads() -> int:
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


def _block_rng(seed: int, block: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, block])))


# ---------------------------------------------------------------------------
# shared path plumbing


@dataclass
class _Plan:
    """Simulation nodes and per-step deterministic quantities."""

    nodes: np.ndarray
    step_cell: np.ndarray
    cell_edges: np.ndarray
    invest: np.ndarray
    theta: TripletPath
    atoms: np.ndarray
    atom_rate: np.ndarray  # (n_cells, A) intensity of each union atom per cell
    extra: dict = field(default_factory=dict)


def _plan(policy: PolicyPath, theta: TripletPath, step: float) -> _Plan:
    edges = policy.edges
    nodes = refine_edges(edges, step)
    mids = 0.5 * (nodes[:-1] + nodes[1:])
    step_cell = np.clip(np.searchsorted(edges, mids, side="right") - 1, 0, edges.size - 2)
    locs = [th.jumps.locations for th in theta.triplets if th.jumps.n_atoms]
    d = policy.invest.shape[1]
    atoms = np.unique(np.vstack(locs), axis=0) if locs else np.zeros((0, d))
    rate = np.zeros((len(theta), atoms.shape[0]))
    for k, th in enumerate(theta.triplets):
        for z, w in zip(th.jumps.locations, th.jumps.intensities):
            rate[k, np.nonzero(np.all(atoms == z, axis=1))[0][0]] = w
    return _Plan(nodes, step_cell, edges, policy.invest, theta, atoms, rate)


def _draw_events(plan: _Plan, rng: np.random.Generator, n: int):
    """Jump events over [0, T]: (path, atom, time, cell), exact Poisson clocks per atom and cell."""
    paths, atoms, times, cells = [], [], [], []
    e = plan.cell_edges
    for a in range(plan.atoms.shape[0]):
        # group consecutive cells with equal rate into one clock
        r = plan.atom_rate[:, a]
        k = 0
        while k < r.size:
            j = k
            while j + 1 < r.size and r[j + 1] == r[k]:
                j += 1
            if r[k] > 0:
                t0, t1 = e[k], e[j + 1]
                cnt = rng.poisson(r[k] * (t1 - t0), size=n)
                tot = int(cnt.sum())
                if tot:
                    pth = np.repeat(np.arange(n), cnt)
                    tau = t0 + (t1 - t0) * rng.random(tot)
                    paths.append(pth)
                    atoms.append(np.full(tot, a))
                    times.append(tau)
            k = j + 1
    if not paths:
        z = np.zeros(0, dtype=np.int64)
        return z, z, np.zeros(0), z
    pth, atm, tau = np.concatenate(paths), np.concatenate(atoms), np.concatenate(times)
    cell = np.clip(np.searchsorted(e, tau, side="right") - 1, 0, e.size - 2)
    return pth, atm, tau, cell


def _gaussians(rng: np.random.Generator, n: int, n_steps: int, antithetic: bool) -> np.ndarray:
    if antithetic:
        h = rng.standard_normal((n_steps, n // 2))
        return np.concatenate([h, -h], axis=1)
    return rng.standard_normal((n_steps, n))


def _step_slices(step_of_event: np.ndarray, n_steps: int):
    order = np.argsort(step_of_event, kind="stable")
    bounds = np.searchsorted(step_of_event[order], np.arange(n_steps + 1))
    return order, bounds


def _run_blocks(fn, cfg: BundleConfig):
    sizes = []
    left = cfg.n_paths
    while left > 0:
        sizes.append(min(cfg.block, left))
        left -= sizes[-1]
    if cfg.antithetic and any(s % 2 for s in sizes):
        raise ValueError("antithetic sampling needs even block sizes")
    jobs = list(enumerate(sizes))
    threads = _threads()
    if threads > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(threads) as ex:
            parts = list(ex.map(lambda j: fn(_block_rng(cfg.seed, j[0]), j[1]), jobs))
    else:
        parts = [fn(_block_rng(cfg.seed, b), n) for b, n in jobs]
    return [np.concatenate([p[i] for p in parts]) for i in range(len(parts[0]))]


# ---------------------------------------------------------------------------
# CRRA


def simulate_wealth_crra(policy: PolicyPath, theta: TripletPath, utility: UtilitySpec, w0: float,
                         cfg: BundleConfig) -> SimResult:
    """Exact log-wealth paths; objective int U(c W) dt + U(W_T) per path."""
    if policy.kind != "crra" or not utility.is_crra:
        raise ValueError("CRRA simulation needs a CRRA policy and utility")
    if w0 <= 0:
        raise ValueError("CRRA wealth must start positive")
    p = utility.p
    plan = _plan(policy, theta, cfg.step)
    nodes, sc = plan.nodes, plan.step_cell
    dt = np.diff(nodes)
    A = plan.atoms
    inv = plan.invest
    n_cells = inv.shape[0]
    # per-cell drift of log W excluding consumption, and log jump sizes
    var = np.empty(n_cells)
    drift = np.empty(n_cells)
    logjump = np.full((n_cells, A.shape[0]), np.nan)
    for k in range(n_cells):
        th, x = theta[k], inv[k]
        var[k] = float(x @ th.covariance @ x)
        mu = float(x @ th.drift) - 0.5 * var[k]
        if A.shape[0]:
            s = A @ x
            ok = s > -1.0
            logjump[k, ok] = np.log1p(s[ok])
            rate = plan.atom_rate[k]
            mu -= float(rate @ s)
            # expected log-jump contribution belongs to the mean part
            mu += float(np.sum(np.where(rate > 0, rate * np.nan_to_num(logjump[k], nan=0.0), 0.0)))
        drift[k] = mu
    c = policy.consumption
    cell_edges = plan.cell_edges
    drift_path = FunctionPath(cell_edges, lambda t: drift[np.clip(np.searchsorted(cell_edges, t, side="right") - 1, 0, n_cells - 1)])
    mean_log = FunctionPath(cell_edges, lambda t: np.log(w0) + drift_path.antiderivative(t) - c.antiderivative(t))
    A_nodes = mean_log(nodes)
    c_nodes = np.asarray(c(nodes), dtype=float)
    if p == 0.0:
        with np.errstate(divide="ignore"):
            logc_int = float(FunctionPath(cell_edges, lambda t: np.log(c(t))).antiderivative(nodes[-1]))
        det_part = logc_int + float(mean_log.antiderivative(nodes[-1]))
    sd_step = np.sqrt(var[sc] * dt)
    comp_step = (plan.atom_rate[sc] * np.nan_to_num(logjump, nan=0.0)[sc]).sum(axis=1) * dt
    n_steps = dt.size

    def block(rng, n):
        Z = _gaussians(rng, n, n_steps, cfg.antithetic)
        pth, atm, tau, cell = _draw_events(plan, rng, n)
        counts = np.zeros((n, A.shape[0]))
        if pth.size:
            lj = logjump[cell, atm]
            bad = np.isnan(lj)
            if np.any(bad):
                i = int(np.argmin(np.where(bad, tau, np.inf)))
                raise Bankruptcy(f"jump at t={tau[i]:.6g} drives 1 + pi.z to {1 + float(A[atm[i]] @ inv[cell[i]]):.6g}")
            np.add.at(counts, (pth, atm), 1.0)
            est = np.clip(np.searchsorted(nodes, tau, side="left") - 1, 0, n_steps - 1)
            order, bounds = _step_slices(est, n_steps)
        M = np.zeros(n)
        trap = np.zeros(n)
        if p != 0.0:
            f_prev = (c_nodes[0] * np.exp(A_nodes[0])) ** p / p * np.ones(n)
            util = np.zeros(n)
        for j in range(n_steps):
            Mn = M + sd_step[j] * Z[j] - comp_step[j]
            if pth.size and bounds[j + 1] > bounds[j]:
                sl = order[bounds[j] : bounds[j + 1]]
                np.add.at(Mn, pth[sl], logjump[cell[sl], atm[sl]])
            if p == 0.0:
                trap += 0.5 * dt[j] * (M + Mn)
            else:
                f_next = np.exp(p * (A_nodes[j + 1] + Mn)) * c_nodes[j + 1] ** p / p
                util += 0.5 * dt[j] * (f_prev + f_next)
                f_prev = f_next
            M = Mn
        logW = A_nodes[-1] + M
        if p == 0.0:
            util = det_part + trap
            obj = util + logW
        else:
            obj = util + np.exp(p * logW) / p
        return obj, logW, util, counts

    obj, logW, util, counts = _run_blocks(block, cfg)
    expected = (plan.atom_rate * np.diff(cell_edges)[:, None]).sum(axis=0)
    return SimResult(obj, logW, util, A, counts, expected, cfg.antithetic)


# ---------------------------------------------------------------------------
# CARA


def simulate_wealth_cara(policy: PolicyPath, theta: TripletPath, utility: UtilitySpec, w0: float,
                         cfg: BundleConfig) -> SimResult:
    """Exact paths of Y = q W; consumption C = D + q W; objective int U(C) dt + U(W_T)."""
    if policy.kind != "cara" or utility.is_crra:
        raise ValueError("CARA simulation needs a CARA policy and utility")
    a = utility.a
    plan = _plan(policy, theta, cfg.step)
    nodes, sc = plan.nodes, plan.step_cell
    T = float(nodes[-1])
    dt = np.diff(nodes)
    u = T - nodes + 1.0
    int_q = np.log(u[:-1] / u[1:])
    int_q2 = 1.0 / u[1:] - 1.0 / u[:-1]
    A = plan.atoms
    inv = plan.invest
    n_cells = inv.shape[0]
    var = np.array([float(inv[k] @ theta[k].covariance @ inv[k]) for k in range(n_cells)])
    pb = np.array([float(inv[k] @ theta[k].drift) for k in range(n_cells)])
    jump_size = A @ inv.T if A.shape[0] else np.zeros((0, n_cells))  # (A, n_cells)
    D = policy.consumption
    qD = FunctionPath(plan.cell_edges, lambda t: q_of(t, T) * D(t))
    int_qD = np.diff(qD.antiderivative(nodes))
    mean_inc = pb[sc] * int_q - int_qD
    Y_mean = (w0 / (T + 1.0)) + np.concatenate([[0.0], np.cumsum(mean_inc)])
    D_nodes = np.asarray(D(nodes), dtype=float)
    sd_step = np.sqrt(var[sc] * int_q2)
    comp_step = (plan.atom_rate[sc] * jump_size.T[sc]).sum(axis=1) * int_q if A.shape[0] else np.zeros(dt.size)
    n_steps = dt.size

    def U(x):
        return -np.exp(-a * x) / a

    def block(rng, n):
        Z = _gaussians(rng, n, n_steps, cfg.antithetic)
        pth, atm, tau, cell = _draw_events(plan, rng, n)
        counts = np.zeros((n, A.shape[0]))
        if pth.size:
            np.add.at(counts, (pth, atm), 1.0)
            contrib = jump_size[atm, cell] * q_of(tau, T)
            est = np.clip(np.searchsorted(nodes, tau, side="left") - 1, 0, n_steps - 1)
            order, bounds = _step_slices(est, n_steps)
        M = np.zeros(n)
        f_prev = U(D_nodes[0] + Y_mean[0] + M)
        util = np.zeros(n)
        for j in range(n_steps):
            Mn = M + sd_step[j] * Z[j] - comp_step[j]
            if pth.size and bounds[j + 1] > bounds[j]:
                sl = order[bounds[j] : bounds[j + 1]]
                np.add.at(Mn, pth[sl], contrib[sl])
            f_next = U(D_nodes[j + 1] + Y_mean[j + 1] + Mn)
            util += 0.5 * dt[j] * (f_prev + f_next)
            f_prev = f_next
            M = Mn
        WT = Y_mean[-1] + M
        return util + U(WT), WT, util, counts

    obj, WT, util, counts = _run_blocks(block, cfg)
    expected = (plan.atom_rate * np.diff(plan.cell_edges)[:, None]).sum(axis=0)
    return SimResult(obj, WT, util, A, counts, expected, cfg.antithetic)


# ---------------------------------------------------------------------------
# estimation and verification


def simulate(policy: PolicyPath, theta: TripletPath, utility: UtilitySpec, w0: float, cfg: BundleConfig) -> SimResult:
    if utility.is_crra:
        return simulate_wealth_crra(policy, theta, utility, w0, cfg)
    return simulate_wealth_cara(policy, theta, utility, w0, cfg)


def _se(values: np.ndarray) -> float:
    # shifting by a sample keeps a constant sample at exactly zero spread
    return float(np.std(values - values[0], ddof=1) / np.sqrt(values.size))


def _estimate(values: np.ndarray, antithetic: bool, block: int = BLOCK) -> tuple[float, float]:
    if antithetic:
        # antithetic partners sit in the two halves of each block; pair them up
        pairs = _antithetic_pairs(values, block)
        return float(np.mean(pairs)), _se(pairs)
    return float(np.mean(values)), _se(values)


def _antithetic_pairs(values: np.ndarray, block: int = BLOCK) -> np.ndarray:
    out = []
    for s in range(0, values.size, block):
        b = values[s : s + block]
        h = b.size // 2
        out.append(0.5 * (b[:h] + b[h:]))
    return np.concatenate(out)


def estimate_objective(policy: PolicyPath, theta: TripletPath, utility: UtilitySpec, w0: float,
                       n_paths: int, seed: int, *, step: float = 1e-3, antithetic: bool = False) -> ObjectiveEstimate:
    cfg = BundleConfig(seed, n_paths, step, antithetic)
    res = simulate(policy, theta, utility, w0, cfg)
    mean, se = _estimate(res.objective, antithetic, cfg.block)
    return ObjectiveEstimate(mean, se, n_paths, seed, step)


def verify_martingale_equality(solution, n_paths: int, seed: int, *, step: float = 1e-3, z_max: float = 3.0) -> dict:
    """MC objective at (optimal policy, worst-case triplets) against the closed-form value."""
    est = estimate_objective(solution.policy, solution.theta, solution.utility, solution.w0, n_paths, seed, step=step)
    z = est.z_score(solution.value)
    report = dict(target=solution.value, mean=est.mean, se=est.se, z=z, n=n_paths, seed=seed, step=step,
                  passed=bool(abs(z) <= z_max))
    if not report["passed"]:
        raise EqualityViolation(f"|z| = {abs(z):.2f} > {z_max}", z_score=z)
    return report


@dataclass(frozen=True)
class Perturbation:
    """A policy change (scale investment, shift consumption) or a replacement triplet path."""

    name: str
    invest_scale: float = 1.0
    consumption_shift: float = 0.0
    consumption_scale: float = 1.0
    theta: TripletPath | None = None


def default_perturbations(solution, sets, cell_segment) -> list[Perturbation]:
    """Scale x* by 0.5 and 1.5, shift c* (or D*) both ways, and every vertex as a triplet path."""
    shift = 0.05
    out = [
        Perturbation("identity"),
        Perturbation("invest x0.5", 0.5),
        Perturbation("invest x1.5", 1.5),
        Perturbation(f"consumption +{shift}", 1.0, shift),
    ]
    if not solution.utility.is_crra:
        out.append(Perturbation(f"consumption -{shift}", 1.0, -shift))
    else:
        out.append(Perturbation("consumption x0.8", consumption_scale=0.8))
    n_vert = min(len(s) for s in sets)
    for i in range(n_vert):
        trips = tuple(sets[s].vertices[i] for s in cell_segment)
        w = tuple(np.eye(len(sets[s]))[i] for s in cell_segment)
        out.append(Perturbation(f"vertex {i}", theta=TripletPath(trips, w)))
    return out


def _perturbed_policy(solution, pert: Perturbation) -> PolicyPath:
    base = solution.policy
    inv = base.invest * pert.invest_scale
    cons = base.consumption
    if pert.consumption_shift or pert.consumption_scale != 1.0:
        sh, f = pert.consumption_shift, pert.consumption_scale
        cons = FunctionPath(cons.edges, lambda t, c=cons: f * c(t) + sh)
    return PolicyPath(base.kind, inv, cons, base.edges)


def verify_objective_saddle(solution, perturbations, n_paths: int, seed: int, *, step: float = 1e-3,
                            z_max: float = 3.0) -> list[dict]:
    """J(perturbed policy, theta*) <= J(optimum, theta*) and J(optimum, theta) >= J(optimum, theta*).

    Common random numbers: every run reuses the seed; the band is 3 standard
    errors of the paired differences.
    """
    cfg = BundleConfig(seed, n_paths, step)
    ut, w0 = solution.utility, solution.w0
    base = simulate(solution.policy, solution.theta, ut, w0, cfg).objective
    rows = []
    for pert in perturbations:
        row = dict(name=pert.name)
        try:
            if pert.theta is not None:
                other = simulate(solution.policy, pert.theta, ut, w0, cfg).objective
                diff = other - base  # should be >= 0
            else:
                other = simulate(_perturbed_policy(solution, pert), solution.theta, ut, w0, cfg).objective
                diff = base - other  # should be >= 0
        except Bankruptcy as exc:
            row.update(passed=True, note=f"inadmissible: {exc}")
            rows.append(row)
            continue
        mean = float(np.mean(diff))
        se = _se(diff)
        row.update(gap=mean, se=se, passed=bool(mean >= -z_max * se - 1e-12))
        rows.append(row)
    bad = [r for r in rows if not r["passed"]]
    if bad:
        raise SaddleViolation(f"saddle inequality fails for {[r['name'] for r in bad]}", perturbation=bad)
    return rows


def jump_count_check(res: SimResult, z_max: float = 3.0) -> list[dict]:
    """Empirical jump counts per atom against the intensity integral."""
    rows = []
    n = res.jump_counts.shape[0]
    for a in range(res.atoms.shape[0]):
        c = res.jump_counts[:, a]
        se = float(np.std(c, ddof=1) / np.sqrt(n))
        z = (float(c.mean()) - float(res.expected_jumps[a])) / se if se > 0 else 0.0
        rows.append(dict(atom=res.atoms[a].tolist(), mean=float(c.mean()), expected=float(res.expected_jumps[a]),
                         z=z, passed=bool(abs(z) <= z_max)))
    return rows
