"""YAML market-spec reader with field and line diagnostics.

See docs/spec_schema.md for the schema.  Every mapping rejects unknown
keys; every error names the offending field and its line.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
import yaml

from .errors import SpecParseError, ValidationError
from .market import ConfidenceSet, DiscreteLevyMeasure, LevyTriplet, MarketSpec, TimeGrid, UtilitySpec

TOP_KEYS = {"horizon", "grid-step", "w0", "epsilon", "utility", "segments"}
UTILITY_KEYS = {"family", "p", "a"}
SEGMENT_KEYS = {"end", "kappa", "vertices"}
VERTEX_KEYS = {"drift", "covariance", "atoms"}
ATOM_KEYS = {"z", "w"}


def _line(node) -> int:
    return node.start_mark.line + 1


def _mapping(node, allowed: set[str], where: str, required: set[str] = frozenset()) -> dict:
    if not isinstance(node, yaml.MappingNode):
        raise SpecParseError("expected a mapping", field=where, line=_line(node))
    out = {}
    for k, v in node.value:
        key = k.value
        name = f"{where}.{key}" if where else key
        if key not in allowed:
            raise SpecParseError(f"unknown field {key!r}", field=name, line=_line(k))
        if key in out:
            raise SpecParseError(f"duplicate field {key!r}", field=name, line=_line(k))
        out[key] = v
    for key in sorted(required - out.keys()):
        raise SpecParseError(f"missing required field {key!r}", field=f"{where}.{key}" if where else key,
                             line=_line(node))
    return out


def _number(node, field: str) -> float:
    if not isinstance(node, yaml.ScalarNode):
        raise SpecParseError("expected a number", field=field, line=_line(node))
    try:
        val = float(node.value)
    except (TypeError, ValueError):
        raise SpecParseError(f"expected a number, got {node.value!r}", field=field, line=_line(node)) from None
    if not np.isfinite(val):
        raise SpecParseError("number must be finite", field=field, line=_line(node))
    return val


def _vector(node, field: str) -> np.ndarray:
    if isinstance(node, yaml.ScalarNode):
        return np.array([_number(node, field)])
    if not isinstance(node, yaml.SequenceNode) or not node.value:
        raise SpecParseError("expected a number or a nonempty list of numbers", field=field, line=_line(node))
    return np.array([_number(v, f"{field}[{i}]") for i, v in enumerate(node.value)])


def _string(node, field: str) -> str:
    if not isinstance(node, yaml.ScalarNode):
        raise SpecParseError("expected a string", field=field, line=_line(node))
    return node.value


def lower_to_full(entries: np.ndarray, d: int) -> np.ndarray:
    """Symmetric matrix from its lower-triangular entries listed row by row."""
    if entries.size != d * (d + 1) // 2:
        raise ValueError(f"expected {d * (d + 1) // 2} lower-triangular entries for d={d}, got {entries.size}")
    m = np.zeros((d, d))
    m[np.tril_indices(d)] = entries
    return m + np.tril(m, -1).T


def _vertex(node, field: str, d: int | None) -> LevyTriplet:
    m = _mapping(node, VERTEX_KEYS, field, {"drift", "covariance"})
    b = _vector(m["drift"], f"{field}.drift")
    if d is not None and b.size != d:
        raise SpecParseError(f"drift has dimension {b.size}, expected {d}", field=f"{field}.drift",
                             line=_line(m["drift"]))
    d = b.size
    cov_entries = _vector(m["covariance"], f"{field}.covariance")
    try:
        cov = lower_to_full(cov_entries, d)
    except ValueError as exc:
        raise SpecParseError(str(exc), field=f"{field}.covariance", line=_line(m["covariance"])) from None
    atoms = []
    if "atoms" in m:
        an = m["atoms"]
        if not isinstance(an, yaml.SequenceNode):
            raise SpecParseError("expected a list of atoms", field=f"{field}.atoms", line=_line(an))
        for i, a in enumerate(an.value):
            af = f"{field}.atoms[{i}]"
            am = _mapping(a, ATOM_KEYS, af, ATOM_KEYS)
            z = _vector(am["z"], f"{af}.z")
            if z.size != d:
                raise SpecParseError(f"atom has dimension {z.size}, expected {d}", field=f"{af}.z", line=_line(am["z"]))
            if any(np.array_equal(z, prev) for prev, _, _ in atoms):
                raise SpecParseError("duplicate atom location", field=f"{af}.z", line=_line(am["z"]))
            w = _number(am["w"], f"{af}.w")
            if w <= 0:
                raise SpecParseError("atom intensity must be strictly positive", field=f"{af}.w", line=_line(am["w"]))
            atoms.append((z, w, _line(a)))
    try:
        jumps = DiscreteLevyMeasure.from_atoms([(z, w) for z, w, _ in atoms], d)
    except ValidationError as exc:
        raise SpecParseError(str(exc), field=f"{field}.atoms", line=_line(m.get("atoms", node))) from None
    try:
        return LevyTriplet(b, cov, jumps)
    except ValidationError as exc:
        raise SpecParseError(str(exc), field=f"{field}.covariance", line=_line(m["covariance"])) from None


def parse_spec_text(text: str, source: str = "<spec>") -> MarketSpec:
    try:
        root = yaml.compose(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise SpecParseError(f"{source}: malformed YAML: {getattr(exc, 'problem', exc)}",
                             line=mark.line + 1 if mark else None) from None
    if root is None:
        raise SpecParseError(f"{source}: empty spec")
    top = _mapping(root, TOP_KEYS, "", {"horizon", "grid-step", "w0", "utility", "segments"})
    T = _number(top["horizon"], "horizon")
    step = _number(top["grid-step"], "grid-step")
    w0 = _number(top["w0"], "w0")
    eps = _number(top["epsilon"], "epsilon") if "epsilon" in top else 2.0

    um = _mapping(top["utility"], UTILITY_KEYS, "utility", {"family"})
    fam = _string(um["family"], "utility.family")
    try:
        if fam == "crra-log":
            if "a" in um or "p" in um and _number(um["p"], "utility.p") != 0.0:
                raise ValidationError("log utility takes no parameters besides p = 0")
            util = UtilitySpec.log()
        elif fam == "crra-power":
            if "p" not in um or "a" in um:
                raise ValidationError("power utility needs p (and no a)")
            util = UtilitySpec.power(_number(um["p"], "utility.p"))
        elif fam == "cara":
            if "a" not in um or "p" in um:
                raise ValidationError("CARA utility needs a (and no p)")
            util = UtilitySpec.cara(_number(um["a"], "utility.a"))
        else:
            raise ValidationError(f"unknown utility family {fam!r} (crra-log, crra-power, cara)")
    except ValidationError as exc:
        raise SpecParseError(str(exc), field="utility", line=_line(top["utility"])) from None

    sn = top["segments"]
    if not isinstance(sn, yaml.SequenceNode) or not sn.value:
        raise SpecParseError("expected a nonempty list of segments", field="segments", line=_line(sn))
    breakpoints = [0.0]
    sets = []
    d = None
    for i, s in enumerate(sn.value):
        sf = f"segments[{i}]"
        sm = _mapping(s, SEGMENT_KEYS, sf, {"end", "vertices"})
        breakpoints.append(_number(sm["end"], f"{sf}.end"))
        vn = sm["vertices"]
        if not isinstance(vn, yaml.SequenceNode) or not vn.value:
            raise SpecParseError("expected a nonempty list of vertices", field=f"{sf}.vertices", line=_line(vn))
        verts = []
        for j, v in enumerate(vn.value):
            th = _vertex(v, f"{sf}.vertices[{j}]", d)
            d = th.dim
            verts.append(th)
        kappa = _number(sm["kappa"], f"{sf}.kappa") if "kappa" in sm else None
        try:
            sets.append(ConfidenceSet(tuple(verts), kappa))
        except ValidationError as exc:
            raise SpecParseError(str(exc), field=sf, line=_line(s)) from None
    try:
        grid = TimeGrid(T, tuple(breakpoints), step)
    except ValidationError as exc:
        raise SpecParseError(str(exc), field="segments", line=_line(sn)) from None
    try:
        return MarketSpec(grid, tuple(sets), util, w0, eps)
    except ValidationError as exc:
        raise SpecParseError(str(exc), field="segments", line=_line(sn)) from None


def load_spec(path) -> MarketSpec:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise SpecParseError(f"cannot read {p}: {exc.strerror}") from None
    return parse_spec_text(text, str(p))


def _fmt(x: float) -> str:
    return repr(float(x))


def dump_spec(spec: MarketSpec) -> str:
    """Serialize a MarketSpec back to the YAML schema (lossless floats)."""
    lines = [
        f"horizon: {_fmt(spec.horizon)}",
        f"grid-step: {_fmt(spec.grid.step)}",
        f"w0: {_fmt(spec.w0)}",
        f"epsilon: {_fmt(spec.epsilon)}",
        "utility:",
        f"  family: {spec.utility.family}",
    ]
    if spec.utility.family == "crra-power":
        lines.append(f"  p: {_fmt(spec.utility.p)}")
    if spec.utility.family == "cara":
        lines.append(f"  a: {_fmt(spec.utility.a)}")
    lines.append("segments:")
    for end, cset in zip(spec.grid.breakpoints[1:], spec.sets):
        lines.append(f"  - end: {_fmt(end)}")
        if cset.kappa is not None:
            lines.append(f"    kappa: {_fmt(cset.kappa)}")
        lines.append("    vertices:")
        for v in cset.vertices:
            d = v.dim
            lines.append(f"      - drift: [{', '.join(_fmt(x) for x in v.drift)}]")
            lines.append(f"        covariance: [{', '.join(_fmt(x) for x in v.covariance[np.tril_indices(d)])}]")
            if v.jumps.n_atoms:
                lines.append("        atoms:")
                for z, w in zip(v.jumps.locations, v.jumps.intensities):
                    lines.append(f"          - {{z: [{', '.join(_fmt(x) for x in z)}], w: {_fmt(w)}}}")
    return "\n".join(lines) + "\n"
