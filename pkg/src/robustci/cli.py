"""Command-line front end: check, solve, evaluate, simulate, verify, report.

Exit codes: 0 success, 1 usage or parse error, 2 validation failure,
3 solver failure, 4 verification failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .errors import (
    AssumptionViolation,
    BoundsViolation,
    DegenerateSupport,
    EqualityViolation,
    LPFailure,
    MismatchError,
    NoConvergence,
    RangeViolation,
    RobustCIError,
    SaddleCertificateFailure,
    SaddleViolation,
    SpecParseError,
    StepRejection,
    ValidationError,
)
from .kernels import PolicyPath, TripletPath, cara_kernel_path, q_of
from .market import MarketSpec, jump_support_union
from .paths import FunctionPath, StepPath
from .policy import (
    SaddleSolution,
    check_hjb_containment,
    consumption_range_check,
    global_value,
    hjb_bounds,
    solve_ode_cara,
    solve_riccati_crra,
    value_function,
    value_path_from_consumption,
    value_path_from_excess,
)
from .saddle import KernelContext, SolverConfig, domain_sampler, cell_average_q, check_segment, saddle_certificate, solve
from .simulation import (
    BundleConfig,
    ObjectiveEstimate,
    _estimate,
    default_perturbations,
    jump_count_check,
    simulate,
    verify_martingale_equality,
    verify_objective_saddle,
)
from .specfile import load_spec

EXIT_OK, EXIT_PARSE, EXIT_VALIDATION, EXIT_SOLVER, EXIT_VERIFY = 0, 1, 2, 3, 4
FORMATS = ("csv", "jsonl")


@dataclass(frozen=True)
class RunConfig:
    command: str
    spec: Path
    out: Path | None
    seed: int | None = None
    paths: int | None = None
    step: float | None = None
    tol: float = 1e-6
    fmt: str = "csv"

    def __post_init__(self):
        if self.fmt not in FORMATS:
            raise ValueError(f"format must be one of {FORMATS}")
        if self.command in ("simulate", "verify") and None in (self.seed, self.paths, self.step):
            raise ValueError(f"{self.command} needs --seed, --paths and --step")


# ---------------------------------------------------------------------------
# output helpers


def fnum(x) -> str:
    """Shortest round-trip decimal for floats; plain str for everything else."""
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    if isinstance(x, (np.integer,)):
        return str(int(x))
    return str(x)


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return [_jsonable(v) for v in x.tolist()]
    if isinstance(x, (np.floating,)):
        return float(x)
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.bool_,)):
        return bool(x)
    if isinstance(x, float) and not np.isfinite(x):
        return repr(x)
    return x


def atomic_write(path: Path, text: str) -> None:
    """Write through a temporary file in the same directory, then rename."""
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def render_table(rows: list[dict], fmt: str) -> str:
    if fmt == "jsonl":
        return "".join(json.dumps(_jsonable(r)) + "\n" for r in rows)
    if not rows:
        return ""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    keys = list(rows[0].keys())
    w.writerow(keys)
    for r in rows:
        w.writerow([fnum(r[k]) for k in keys])
    return buf.getvalue()


def read_table(path: Path) -> list[dict]:
    """Inverse of render_table; numeric CSV fields come back as floats."""
    text = path.read_text()
    if path.suffix == ".jsonl":
        return [json.loads(line) for line in text.splitlines() if line.strip()]
    rows = []
    for r in csv.DictReader(io.StringIO(text)):
        out = {}
        for k, v in r.items():
            try:
                out[k] = float(v)
            except ValueError:
                out[k] = v
        rows.append(out)
    return rows


def write_table(out: Path, name: str, rows: list[dict], fmt: str) -> Path:
    path = out / f"{name}.{fmt}"
    atomic_write(path, render_table(rows, fmt))
    return path


def write_json(path: Path, obj) -> None:
    atomic_write(path, json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n")


def _find_table(out: Path, name: str) -> Path:
    for fmt in FORMATS:
        p = out / f"{name}.{fmt}"
        if p.exists():
            return p
    raise FileNotFoundError(f"no {name}.csv or {name}.jsonl under {out}")


# ---------------------------------------------------------------------------
# commands


def run_check(spec: MarketSpec, cfg: SolverConfig | None = None) -> list[dict]:
    """Standing assumptions per segment; raises on the first failure."""
    cfg = cfg or SolverConfig()
    rows = []
    for k, cset in enumerate(spec.sets):
        row = dict(segment=k, t0=spec.grid.breakpoints[k], t1=spec.grid.breakpoints[k + 1],
                   vertices=len(cset), kappa=cset.check_bound(spec.epsilon))
        sup = jump_support_union(cset)
        row["atoms"] = int(sup.points.shape[0])
        res = check_segment(cset, spec, spec.grid.breakpoints[k], cfg)
        row["kappa_nd"] = res.get("kappa_nd", float("nan"))
        row["kappa_bound"] = res.get("kappa_bound", float("nan"))
        row["sharpe_max"] = float(np.sqrt(res["sharpe_sq_max"])) if np.isfinite(res["sharpe_sq_max"]) else float("nan")
        row["sharpe_bound"] = float(np.sqrt(res["sharpe_sq_bound"]))
        row["passed"] = True
        rows.append(row)
    return rows


def solution_tables(spec: MarketSpec, sol: SaddleSolution) -> tuple[list[dict], list[dict], dict]:
    edges = sol.edges
    seg = spec.grid.cell_segment
    cells = []
    for k in range(edges.size - 1):
        row = dict(cell=k, t0=edges[k], t1=edges[k + 1], segment=int(seg[k]))
        for i, x in enumerate(sol.invest[k]):
            row[f"x{i}"] = x
        m = max(len(s) for s in spec.sets)
        w = sol.theta.weights[k]
        for i in range(m):
            row[f"w{i}"] = w[i] if i < w.size else 0.0
        row["kernel"] = sol.cell_kernel[k]
        row["certificate"] = sol.certificates[k]
        cells.append(row)
    ts, cs = sol.consumption.sample(2)
    name = "c" if sol.utility.is_crra else "D"
    path_rows = [{"t": t, name: c} for t, c in zip(ts, cs)]
    summary = dict(
        family=sol.utility.family, p=sol.utility.p, a=sol.utility.a, w0=sol.w0, horizon=sol.horizon,
        n_cells=int(edges.size - 1), dim=int(sol.invest.shape[1]), global_value=sol.global_value,
        value=sol.value, max_certificate=float(np.max(sol.certificates)), version=__version__,
    )
    return cells, path_rows, summary


def run_solve(spec: MarketSpec, out: Path | None, fmt: str = "csv", cfg: SolverConfig | None = None):
    cfg = cfg or SolverConfig()
    sol = solve(spec, cfg)
    cells, path_rows, summary = solution_tables(spec, sol)
    if out is not None:
        write_table(out, "cells", cells, fmt)
        write_table(out, "path", path_rows, fmt)
        write_json(out / "summary.json", summary)
    return sol, summary


def load_solution(spec: MarketSpec, out: Path) -> SaddleSolution:
    """Rebuild a SaddleSolution from the stored tables (stored x*, theta* weights and consumption)."""
    cells = read_table(_find_table(out, "cells"))
    path_rows = read_table(_find_table(out, "path"))
    summary = json.loads((out / "summary.json").read_text())
    edges = spec.grid.edges
    if len(cells) != edges.size - 1:
        raise MismatchError(f"solution has {len(cells)} cells, spec grid has {edges.size - 1}")
    d = spec.dim
    seg = spec.grid.cell_segment
    invest = np.array([[float(r[f"x{i}"]) for i in range(d)] for r in cells])
    weights = [np.array([float(r[f"w{i}"]) for i in range(len(spec.sets[s]))]) for r, s in zip(cells, seg)]
    for k, w in enumerate(weights):
        if np.any(w < -1e-12) or abs(w.sum() - 1.0) > 1e-9:
            raise MismatchError(f"stored weights at cell {k} are not a probability vector")
    theta = TripletPath.from_weights(spec.grid, spec.sets, [np.clip(w, 0, None) / np.clip(w, 0, None).sum() for w in weights])
    name = "c" if spec.utility.is_crra else "D"
    ts = np.array([float(r["t"]) for r in path_rows])
    vals = np.array([float(r[name]) for r in path_rows])
    cons = FunctionPath(edges, lambda t: np.interp(t, ts, vals))
    u = spec.utility
    if u.is_crra:
        kernel = StepPath(edges, [float(r["kernel"]) for r in cells])
    else:
        kernel = cara_kernel_path(PolicyPath("cara", invest, 0.0, edges), theta, u.a)
    sol = SaddleSolution(
        u, spec.w0, edges, invest, theta, kernel, cons, float(summary["global_value"]), float(summary["value"]),
        np.array([float(r["kernel"]) for r in cells]), np.array([float(r["certificate"]) for r in cells]),
    )
    sol.meta["path_samples"] = (ts, vals)
    return sol


def _verdict(name: str, fn) -> dict:
    try:
        detail = fn()
        return dict(check=name, passed=True, detail=detail if detail is not None else "")
    except (RangeViolation, BoundsViolation, MismatchError, SaddleCertificateFailure, EqualityViolation,
            SaddleViolation, StepRejection) as exc:
        extra = {}
        if isinstance(exc, EqualityViolation):
            extra["z"] = exc.z_score
        return dict(check=name, passed=False, detail=str(exc), **extra)


def run_verify(spec: MarketSpec, out: Path, *, seed: int, paths: int, step: float, tol: float = 1e-6,
               cfg: SolverConfig | None = None) -> list[dict]:
    cfg = cfg or SolverConfig()
    sol = load_solution(spec, out)
    u = spec.utility
    T = spec.horizon
    edges = sol.edges
    ts, vals = sol.meta["path_samples"]
    seg = spec.grid.cell_segment
    verdicts = []

    def certificates():
        worst = 0.0
        seen = {}
        for k in range(edges.size - 1):
            cset = spec.sets[seg[k]]
            if u.is_crra:
                ctx = KernelContext.crra(u.p)
                key = (int(seg[k]), sol.invest[k].tobytes(), sol.theta.weights[k].tobytes())
                if key in seen:
                    continue
                seen[key] = True
            else:
                ctx = KernelContext.cara(cell_average_q(edges[k], edges[k + 1], T), u.a)
            x = sol.invest[k]
            w = sol.theta.weights[k]
            value = ctx.value(x, sol.theta[k])
            sampler = domain_sampler(cset, ctx, cfg, None, x)
            rng = np.random.default_rng([cfg.seed, k])
            c = saddle_certificate(cset, ctx, x, w, value, cfg, sampler, rng)
            worst = max(worst, c)
            if c > tol:
                raise SaddleCertificateFailure(f"cell {k}: certificate {c:.3e} > {tol:g}", violation=c)
        return dict(max_certificate=worst)

    verdicts.append(_verdict("saddle_certificate", certificates))

    def consumption_range():
        if u.is_crra:
            consumption_range_check((ts, vals), sol.kernel, u.p, at_saddle=True)
            return dict(min=float(vals.min()), max=float(vals.max()))
        kmin = float(np.min(sol.kernel.sample(4)[1]))
        if kmin >= 0 and np.any(vals < -1e-12):
            i = int(np.argmin(vals))
            raise RangeViolation(f"D*({ts[i]:.6g}) = {float(vals[i])!r} < 0 with a nonnegative kernel", t=ts[i], value=vals[i])
        return dict(min=float(vals.min()), kernel_min=kmin)

    verdicts.append(_verdict("consumption_range", consumption_range))

    def ode():
        ode_step = 1e-3 * min(np.diff(spec.grid.breakpoints))
        if u.is_crra:
            if u.p == 0.0:
                ref = q_of(ts, T)
            else:
                tt, cc = solve_riccati_crra(sol.kernel, u.p, ode_step)
                ref = np.interp(ts, tt, cc)
        else:
            tt, dd = solve_ode_cara(sol.kernel, ode_step)
            ref = np.interp(ts, tt, dd)
        err = float(np.max(np.abs(ref - vals)))
        if err > tol:
            raise MismatchError(f"stored consumption differs from the backward ODE by {err:.3e}")
        return dict(sup_error=err)

    verdicts.append(_verdict("ode_cross_check", ode))

    def hjb():
        if u.family == "crra-log":
            return "not applicable to log utility"
        kv = sol.kernel.sample(4)[1]
        b = hjb_bounds(float(kv.min()), float(kv.max()), u, T)
        v = value_path_from_consumption(vals, u.p) if u.is_crra else value_path_from_excess(ts, vals, u.a, T)
        check_hjb_containment(ts, v, b, u)
        v0 = float(v[0])
        if abs(v0 - sol.global_value) > tol * max(1.0, abs(v0)):
            raise MismatchError(f"V(0) = {v0!r} differs from the global value {sol.global_value!r}")
        return dict(v_min=b.v_min, v_max=b.v_max, v0=v0)

    verdicts.append(_verdict("hjb_bounds", hjb))

    def values():
        g = global_value(sol.kernel, u)
        if abs(g - sol.global_value) > 1e-8 * max(1.0, abs(g)):
            raise MismatchError(f"stored global value {sol.global_value!r} vs recomputed {g!r}")
        v = value_function(spec.w0, g, u, T)
        if abs(v - sol.value) > 1e-8 * max(1.0, abs(v)):
            raise MismatchError(f"stored value {sol.value!r} vs recomputed {v!r}")
        return dict(global_value=g, value=v)

    verdicts.append(_verdict("closed_form_values", values))
    verdicts.append(_verdict("martingale_equality",
                             lambda: verify_martingale_equality(sol, paths, seed, step=step)))
    perts = default_perturbations(sol, spec.sets, seg)
    verdicts.append(_verdict("objective_saddle",
                             lambda: dict(rows=verify_objective_saddle(sol, perts, paths, seed, step=step))))
    return verdicts


def run_simulate(spec: MarketSpec, out: Path | None, *, seed: int, paths: int, step: float, fmt: str = "csv",
                 antithetic: bool = False, cfg: SolverConfig | None = None) -> dict:
    sol = load_solution(spec, out) if out is not None and (out / "summary.json").exists() else solve(spec, cfg or SolverConfig())
    bcfg = BundleConfig(seed, paths, step, antithetic)
    res = simulate(sol.policy, sol.theta, sol.utility, sol.w0, bcfg)
    mean, se = _estimate(res.objective, antithetic, bcfg.block)
    est = ObjectiveEstimate(mean, se, paths, seed, step)
    record = dict(mean=est.mean, se=est.se, n=paths, seed=seed, step=step, target=sol.value,
                  z=est.z_score(sol.value), antithetic=antithetic)
    jumps = jump_count_check(res)
    if out is not None:
        write_table(out, "simulate", [record], fmt)
        if jumps:
            write_table(out, "jumps", [dict(atom=str(r["atom"]), mean=r["mean"], expected=r["expected"], z=r["z"])
                                       for r in jumps], fmt)
    record["jumps"] = jumps
    return record


def run_evaluate(spec: MarketSpec, out: Path) -> dict:
    """Recompute the global value from the stored policy, directly and in closed form."""
    sol = load_solution(spec, out)
    u = spec.utility
    closed = global_value(sol.kernel, u)
    from .kernels import global_kernel

    direct = global_kernel(sol.policy, sol.theta, u)
    return dict(closed_form=closed, direct=direct, difference=direct - closed,
                value=value_function(spec.w0, closed, u, spec.horizon))


def report_rows(spec: MarketSpec, sol: SaddleSolution) -> list[dict]:
    """Per sample time: t, investment, consumption, kernel, V(t) and the HJB bounds."""
    u = sol.utility
    T = sol.horizon
    ts, vals = sol.meta.get("path_samples") or sol.consumption.sample(2)
    kv = sol.kernel.sample(4)[1]
    try:
        b = hjb_bounds(float(kv.min()), float(kv.max()), u, T)
    except ValueError:
        b = None
    if u.family == "crra-power":
        v = value_path_from_consumption(vals, u.p)
    elif u.family == "cara":
        v = value_path_from_excess(ts, vals, u.a, T)
    else:
        v = np.full(ts.size, np.nan)
    cell = np.clip(np.searchsorted(sol.edges, ts, side="right") - 1, 0, sol.edges.size - 2)
    name = "c" if u.is_crra else "D"
    rows = []
    for i, t in enumerate(ts):
        row = dict(t=t)
        for j, x in enumerate(sol.invest[cell[i]]):
            row[f"x{j}"] = x
        row[name] = vals[i]
        row["kernel"] = float(sol.kernel(t))
        row["V"] = v[i]
        row["v_min"] = b.v_min if b else float("nan")
        row["v_max"] = b.v_max if b else float("nan")
        rows.append(row)
    return rows


# ---------------------------------------------------------------------------
# entry point


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_PARSE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="robustci", description="Robust consumption-investment solver and verifier.")
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, helptext in [
        ("check", "validate the standing assumptions"),
        ("solve", "compute the saddle solution and write tables"),
        ("evaluate", "recompute global values from a stored solution"),
        ("simulate", "Monte-Carlo estimate of the objective at the solution"),
        ("verify", "ODE, HJB, certificate and Monte-Carlo checks on a stored solution"),
        ("report", "plot-ready per-time table from a stored solution"),
    ]:
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--spec", required=True, type=Path)
        p.add_argument("--out", type=Path, default=None)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--paths", type=int, default=None)
        p.add_argument("--step", type=float, default=None)
        p.add_argument("--tol", type=float, default=1e-6)
        p.add_argument("--format", dest="fmt", choices=FORMATS, default="csv")
        if name == "simulate":
            p.add_argument("--antithetic", action="store_true")
    return ap


def _print_rows(rows, fmt):
    sys.stdout.write(render_table(rows, fmt))


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        rc = RunConfig(args.command, args.spec, args.out, args.seed, args.paths, args.step, args.tol, args.fmt)
    except ValueError as exc:
        print(f"robustci: {exc}", file=sys.stderr)
        return EXIT_PARSE
    if rc.command in ("evaluate", "verify", "report") and rc.out is None:
        print(f"robustci: {rc.command} needs --out pointing at a solved directory", file=sys.stderr)
        return EXIT_PARSE
    try:
        spec = load_spec(rc.spec)
    except SpecParseError as exc:
        print(f"robustci: parse error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    cfg = SolverConfig(cert_tol=rc.tol)
    try:
        if rc.command == "check":
            rows = run_check(spec, cfg)
            if rc.out:
                write_table(rc.out, "check", rows, rc.fmt)
            _print_rows(rows, rc.fmt)
            return EXIT_OK
        run_check(spec, cfg)
    except (DegenerateSupport, AssumptionViolation, ValidationError) as exc:
        print(f"robustci: validation failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    try:
        if rc.command == "solve":
            _, summary = run_solve(spec, rc.out, rc.fmt, cfg)
            _print_rows([summary], rc.fmt)
            return EXIT_OK
        if rc.command == "simulate":
            rec = run_simulate(spec, rc.out, seed=rc.seed, paths=rc.paths, step=rc.step, fmt=rc.fmt,
                               antithetic=args.antithetic, cfg=cfg)
            rec.pop("jumps")
            _print_rows([rec], rc.fmt)
            return EXIT_OK
        if rc.command == "evaluate":
            _print_rows([run_evaluate(spec, rc.out)], rc.fmt)
            return EXIT_OK
        if rc.command == "report":
            sol = load_solution(spec, rc.out)
            rows = report_rows(spec, sol)
            write_table(rc.out, "report", rows, rc.fmt)
            _print_rows(rows, rc.fmt)
            return EXIT_OK
        if rc.command == "verify":
            verdicts = run_verify(spec, rc.out, seed=rc.seed, paths=rc.paths, step=rc.step, tol=rc.tol, cfg=cfg)
            flat = [dict(check=v["check"], passed=v["passed"], detail=json.dumps(_jsonable(v["detail"])))
                    for v in verdicts]
            write_table(rc.out, "verify", flat, rc.fmt)
            _print_rows(flat, rc.fmt)
            return EXIT_OK if all(v["passed"] for v in verdicts) else EXIT_VERIFY
    except (SaddleCertificateFailure, NoConvergence, LPFailure) as exc:
        print(f"robustci: solver failed: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except (MismatchError, FileNotFoundError, KeyError) as exc:
        code = EXIT_VERIFY if rc.command == "verify" else EXIT_SOLVER
        print(f"robustci: {type(exc).__name__}: {exc}", file=sys.stderr)
        return code
    except RobustCIError as exc:
        print(f"robustci: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    return EXIT_PARSE


if __name__ == "__main__":
    raise SystemExit(main())
