import json
import shutil

import numpy as np
import pytest

from robustci.cli import (
    EXIT_OK,
    EXIT_PARSE,
    EXIT_VALIDATION,
    EXIT_VERIFY,
    fnum,
    main,
    read_table,
    render_table,
)
from robustci.saddle import solve
from robustci.specfile import load_spec

from conftest import FIXTURES

VERIFY = ["--seed", "3", "--paths", "4000", "--step", "0.01"]

TWO_SEGMENT = """\
horizon: 1.0
grid-step: 0.1
w0: 1.0
utility: {family: crra-log}
segments:
  - end: 0.5
    vertices:
      - {drift: [0.05], covariance: [0.04]}
      - {drift: [0.10], covariance: [0.04]}
  - end: 1.0
    vertices:
      - {drift: [0.02], covariance: [0.04]}
      - {drift: [0.04], covariance: [0.04]}
"""


def fixture(name):
    return str(FIXTURES / f"{name}.yaml")


@pytest.fixture(scope="module")
def solved(tmp_path_factory):
    """Solved output directories for the shipped fixtures."""
    out = {}
    for name in ("merton_log", "crra_power_drift_hull", "cara_constant"):
        d = tmp_path_factory.mktemp(name)
        assert main(["solve", "--spec", fixture(name), "--out", str(d)]) == EXIT_OK
        out[name] = d
    return out


def test_fnum_is_shortest_round_trip():
    for x in (0.1, 1 / 3, -2.0618680330041600, 1e-300, np.float64(2.5)):
        assert float(fnum(x)) == x
    assert fnum(np.float64(0.1)) == "0.1"


def test_check_passes_on_fixtures(capsys):
    for name in ("merton_log", "crra_power_drift_hull", "cara_constant"):
        assert main(["check", "--spec", fixture(name)]) == EXIT_OK
    out = capsys.readouterr().out
    assert "sharpe_max" in out and "passed" in out


def test_check_exit_codes(tmp_path, capsys):
    one_sided = tmp_path / "one_sided.yaml"
    one_sided.write_text(TWO_SEGMENT.replace("{drift: [0.05], covariance: [0.04]}",
                                             "{drift: [0.05], covariance: [0.04], atoms: [{z: [0.1], w: 1.0}]}"))
    assert main(["check", "--spec", str(one_sided)]) == EXIT_VALIDATION
    assert "DegenerateSupport" in capsys.readouterr().err
    not_pd = tmp_path / "not_pd.yaml"
    not_pd.write_text(TWO_SEGMENT.replace("covariance: [0.04]}\n  - end", "covariance: [-0.04]}\n  - end"))
    assert main(["check", "--spec", str(not_pd)]) == EXIT_PARSE
    err = capsys.readouterr().err
    assert "covariance" in err and "line" in err
    sharpe = tmp_path / "sharpe.yaml"
    sharpe.write_text(TWO_SEGMENT.replace("crra-log", "crra-power, p: -1.0").replace("[0.10]", "[0.70]"))
    assert main(["check", "--spec", str(sharpe)]) == EXIT_VALIDATION


def test_usage_errors_exit_1(tmp_path):
    with pytest.raises(SystemExit) as err:
        main(["frobnicate", "--spec", fixture("merton_log")])
    assert err.value.code == EXIT_PARSE
    with pytest.raises(SystemExit) as err:
        main(["solve"])
    assert err.value.code == EXIT_PARSE
    assert main(["simulate", "--spec", fixture("merton_log"), "--paths", "10", "--step", "0.01"]) == EXIT_PARSE
    assert main(["verify", "--spec", fixture("merton_log")] + VERIFY) == EXIT_PARSE  # no --out
    assert main(["check", "--spec", str(tmp_path / "missing.yaml")]) == EXIT_PARSE


def test_solve_summary_values(solved):
    summary = json.loads((solved["merton_log"] / "summary.json").read_text())
    assert summary["value"] == pytest.approx(1.5 * 0.08 - 2 * np.log(2), abs=1e-12)
    assert summary["n_cells"] == 100
    summary = json.loads((solved["cara_constant"] / "summary.json").read_text())
    assert summary["value"] == pytest.approx(-2.06186803300416, abs=1e-9)
    assert summary["max_certificate"] <= 1e-6


def test_solve_is_idempotent_and_atomic(solved, tmp_path):
    d = tmp_path / "again"
    assert main(["solve", "--spec", fixture("merton_log"), "--out", str(d)]) == EXIT_OK
    for name in ("cells.csv", "path.csv", "summary.json"):
        assert (d / name).read_text() == (solved["merton_log"] / name).read_text()
    assert main(["solve", "--spec", fixture("merton_log"), "--out", str(d)]) == EXIT_OK
    assert not [p for p in d.iterdir() if p.name.startswith(".") or p.suffix == ".tmp"]


def test_two_segment_table_has_two_blocks(tmp_path):
    spec = tmp_path / "two.yaml"
    spec.write_text(TWO_SEGMENT)
    assert main(["solve", "--spec", str(spec), "--out", str(tmp_path), "--format", "jsonl"]) == EXIT_OK
    rows = read_table(tmp_path / "cells.jsonl")
    blocks = {(r["x0"], r["w0"], r["w1"], r["kernel"]) for r in rows}
    assert len(blocks) == 2
    assert sorted(b[3] for b in blocks) == pytest.approx([0.005, 0.03125])


def test_report_round_trip_is_lossless(solved):
    from robustci.cli import load_solution, report_rows

    d = solved["crra_power_drift_hull"]
    assert main(["report", "--spec", fixture("crra_power_drift_hull"), "--out", str(d)]) == EXIT_OK
    spec = load_spec(fixture("crra_power_drift_hull"))
    want = report_rows(spec, load_solution(spec, d))
    got = read_table(d / "report.csv")
    assert len(got) == len(want)
    for r1, r2 in zip(got, want):
        assert r1.keys() == r2.keys()
        for k in r1:
            assert r1[k] == r2[k] or (np.isnan(r1[k]) and np.isnan(r2[k]))
    # and the stored path reproduces the in-memory solution exactly
    sol = solve(spec)
    path = read_table(d / "path.csv")
    ts, cs = sol.consumption.sample(2)
    assert [r["t"] for r in path] == ts.tolist() and [r["c"] for r in path] == cs.tolist()


def test_render_table_formats():
    rows = [dict(a=0.1, b="x"), dict(a=1 / 3, b="y")]
    csv = render_table(rows, "csv")
    assert csv.splitlines()[0] == "a,b" and "0.3333333333333333" in csv
    lines = render_table(rows, "jsonl").splitlines()
    assert [json.loads(l)["a"] for l in lines] == [0.1, 1 / 3]


def test_evaluate(solved, capsys):
    assert main(["evaluate", "--spec", fixture("crra_power_drift_hull"), "--out", str(solved["crra_power_drift_hull"]),
                 "--format", "jsonl"]) == EXIT_OK
    rec = json.loads(capsys.readouterr().out)
    assert abs(rec["difference"]) < 1e-8
    assert rec["value"] == pytest.approx(-3.953423743195124, abs=1e-9)


@pytest.mark.parametrize("name", ["merton_log", "crra_power_drift_hull", "cara_constant"])
def test_verify_passes_on_fixtures(solved, name):
    assert main(["verify", "--spec", fixture(name), "--out", str(solved[name])] + VERIFY) == EXIT_OK
    verdicts = read_table(solved[name] / "verify.csv")
    assert {v["check"] for v in verdicts} >= {"saddle_certificate", "consumption_range", "ode_cross_check",
                                              "martingale_equality", "objective_saddle"}


def _tamper(src, dst, table, column, fn):
    shutil.copytree(src, dst)
    rows = read_table(dst / table)
    for r in rows:
        r[column] = fn(r)
    (dst / table).write_text(render_table(rows, "csv"))


def test_verify_flags_tampered_theta(solved, tmp_path):
    d = tmp_path / "theta"
    _tamper(solved["crra_power_drift_hull"], d, "cells.csv", "w0", lambda r: 0.0)
    rows = read_table(d / "cells.csv")
    for r in rows:
        r["w1"] = 1.0
    (d / "cells.csv").write_text(render_table(rows, "csv"))
    assert main(["verify", "--spec", fixture("crra_power_drift_hull"), "--out", str(d)] + VERIFY) == EXIT_VERIFY
    bad = {v["check"] for v in read_table(d / "verify.csv") if v["passed"] in (False, "False")}
    assert "saddle_certificate" in bad


def test_verify_flags_tampered_consumption(solved, tmp_path):
    d = tmp_path / "cons"
    _tamper(solved["crra_power_drift_hull"], d, "path.csv", "c", lambda r: 1.2)
    assert main(["verify", "--spec", fixture("crra_power_drift_hull"), "--out", str(d)] + VERIFY) == EXIT_VERIFY
    bad = {v["check"] for v in read_table(d / "verify.csv") if v["passed"] in (False, "False")}
    assert "consumption_range" in bad


def test_simulate_writes_outputs(solved, capsys):
    d = solved["merton_log"]
    argv = ["simulate", "--spec", fixture("merton_log"), "--out", str(d), "--format", "jsonl"] + VERIFY
    assert main(argv) == EXIT_OK
    rec = json.loads(capsys.readouterr().out)
    assert abs(rec["mean"] - (1.5 * 0.08 - 2 * np.log(2))) <= 4 * rec["se"]
    assert (d / "simulate.jsonl").exists()
    assert main(argv) == EXIT_OK
    assert json.loads(capsys.readouterr().out) == rec
