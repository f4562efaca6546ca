"""Versioned JSON state files and CSV exports.

Files are canonical: keys sorted, floats written with 17 significant digits,
one record per line.  Saving the same state twice gives identical bytes and
loading gives back bit-identical arrays.
"""
from __future__ import annotations

import csv
import json
import math
import os
import tempfile
from pathlib import Path

import numpy as np

from .deform import DeformedState, DeformParams, state_hash
from .sampler import (KIND_NAMES, SURFACE, ConnectionGraph, SampledState, SamplingParams,
                      SurfaceBindings)

SCHEMA_VERSION = 1
SAMPLED_KIND = "sampled_state"
DEFORMED_KIND = "deformed_state"
ORTHO_TOL = 1e-9


class StateFileError(ValueError):
    """Malformed, inconsistent or incompatible state file."""


# ---------------------------------------------------------------- canonical JSON


def _fmt_float(x: float) -> str:
    if not math.isfinite(x):
        raise StateFileError(f"non-finite value {x!r} cannot be stored")
    s = format(x, ".17g")
    if not any(ch in s for ch in ".en"):
        s += ".0"
    return s


def _scalar(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if v is None:
        return "null"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return _fmt_float(float(v))
    if isinstance(v, str):
        return json.dumps(v, ensure_ascii=True)
    raise TypeError(f"cannot serialise {type(v).__name__}")


def _inline(v) -> str:
    if isinstance(v, dict):
        return "{" + ", ".join(f"{json.dumps(str(k))}: {_inline(v[k])}"
                               for k in sorted(v)) + "}"
    if isinstance(v, (list, tuple, np.ndarray)):
        return "[" + ", ".join(_inline(x) for x in v) + "]"
    return _scalar(v)


def dumps_canonical(obj: dict) -> str:
    """Top-level keys one per line; lists of records one record per line."""
    lines = ["{"]
    keys = sorted(obj)
    for n, k in enumerate(keys):
        v = obj[k]
        tail = "," if n < len(keys) - 1 else ""
        if isinstance(v, list) and v and isinstance(v[0], (dict, list)):
            lines.append(f"  {json.dumps(k)}: [")
            for m, rec in enumerate(v):
                lines.append("    " + _inline(rec) + ("," if m < len(v) - 1 else ""))
            lines.append("  ]" + tail)
        else:
            lines.append(f"  {json.dumps(k)}: {_inline(v)}{tail}")
    lines.append("}")
    return "\n".join(lines) + "\n"


def _atomic_write(path, text: str) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(prefix=path.name + ".", suffix=".tmp", dir=path.parent or ".")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _read_json(path) -> dict:
    raw = Path(path).read_bytes()
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as e:
        raise StateFileError(f"{path}: not UTF-8 at byte {e.start}") from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        offset = len(text[:e.pos].encode("utf-8"))
        raise StateFileError(f"{path}: parse error at byte {offset}: {e.msg}") from None
    if not isinstance(doc, dict):
        raise StateFileError(f"{path}: top level must be an object")
    return doc


def _check_header(doc: dict, kind: str, path) -> None:
    version = doc.get("schema_version")
    if version != SCHEMA_VERSION:
        raise StateFileError(
            f"{path}: schema_version {version!r} not supported (expected {SCHEMA_VERSION})")
    if doc.get("kind") != kind:
        raise StateFileError(f"{path}: expected a {kind} file, found {doc.get('kind')!r}")


def _field(doc: dict, key: str, path):
    if key not in doc:
        raise StateFileError(f"{path}: missing field '{key}'")
    return doc[key]


# ---------------------------------------------------------------- sampled state


def sampled_to_doc(state: SampledState) -> dict:
    b = state.bindings
    return {
        "schema_version": SCHEMA_VERSION,
        "kind": SAMPLED_KIND,
        "params": state.params.to_dict(),
        "mesh_hash": state.mesh_hash,
        "particles": [{"id": i, "pos": state.positions[i], "radius": state.radii[i],
                       "kind": KIND_NAMES[int(state.kinds[i])]} for i in range(state.n)],
        "edges": [[int(i), int(j)] for i, j in state.graph.edges],
        "bindings": [{"particle": int(b.particle[k]), "triangle": int(b.triangle[k]),
                      "barycentric": b.barycentric[k], "offset": b.offset[k]}
                     for k in range(len(b))],
        "diagnostics": state.diagnostics,
    }


def save_sampled(state: SampledState, path) -> None:
    _atomic_write(path, dumps_canonical(sampled_to_doc(state)))


def load_sampled(path) -> SampledState:
    doc = _read_json(path)
    _check_header(doc, SAMPLED_KIND, path)
    try:
        params = SamplingParams(**_field(doc, "params", path))
    except (TypeError, ValueError) as e:
        raise StateFileError(f"{path}: params: {e}") from None
    parts = _field(doc, "particles", path)
    n = len(parts)
    pos = np.empty((n, 3))
    rad = np.empty(n)
    kinds = np.empty(n, np.int8)
    for k, rec in enumerate(parts):
        where = f"{path}: particles[{k}]"
        if rec.get("id") != k:
            raise StateFileError(f"{where}: id {rec.get('id')!r} out of order")
        p = rec.get("pos")
        if not (isinstance(p, list) and len(p) == 3):
            raise StateFileError(f"{where}: pos must have 3 values")
        pos[k] = p
        rad[k] = rec.get("radius", float("nan"))
        if not rad[k] > 0:
            raise StateFileError(f"{where}: radius must be positive")
        if rec.get("kind") not in KIND_NAMES:
            raise StateFileError(f"{where}: unknown kind {rec.get('kind')!r}")
        kinds[k] = KIND_NAMES.index(rec["kind"])
    edges = np.array(_field(doc, "edges", path), dtype=np.int64).reshape(-1, 2)
    for k, (i, j) in enumerate(edges):
        if not i < j:
            raise StateFileError(f"{path}: edges[{k}] = [{i}, {j}] must satisfy i < j")
        if j >= n or i < 0:
            raise StateFileError(f"{path}: edges[{k}] references a missing particle")
        if k and (edges[k - 1, 0], edges[k - 1, 1]) >= (i, j):
            raise StateFileError(f"{path}: edges[{k}] not in sorted order")
    recs = _field(doc, "bindings", path)
    bp = np.empty(len(recs), np.int64)
    bt = np.empty(len(recs), np.int64)
    bb = np.empty((len(recs), 3))
    bo = np.empty(len(recs))
    for k, rec in enumerate(recs):
        where = f"{path}: bindings[{k}]"
        bp[k], bt[k] = rec.get("particle", -1), rec.get("triangle", -1)
        if not 0 <= bp[k] < n or kinds[bp[k]] != SURFACE:
            raise StateFileError(f"{where}: particle {bp[k]} is not a surface particle")
        if bt[k] < 0:
            raise StateFileError(f"{where}: bad triangle id")
        bary = rec.get("barycentric")
        if not (isinstance(bary, list) and len(bary) == 3):
            raise StateFileError(f"{where}: barycentric must have 3 values")
        bb[k] = bary
        bo[k] = rec.get("offset", float("nan"))
    return SampledState(params, str(_field(doc, "mesh_hash", path)), pos, rad, kinds,
                        ConnectionGraph(n, edges), SurfaceBindings(bp, bt, bb, bo),
                        dict(doc.get("diagnostics", {})))


# ---------------------------------------------------------------- deformed state


def deformed_to_doc(state: DeformedState, params: DeformParams | None = None) -> dict:
    doc = {
        "schema_version": SCHEMA_VERSION,
        "kind": DEFORMED_KIND,
        "relax_hash": state.relax_hash,
        "positions": [{"id": i, "pos": state.positions[i]} for i in range(state.n)],
        "rotations": [{"id": i, "rot": state.rotations[i].reshape(9)} for i in range(state.n)],
        "residual": float(state.residual),
        "iterations": int(state.iterations),
        "converged": bool(state.converged),
        "degenerate": [int(i) for i in state.degenerate],
        "landmarks": [{"id": int(lm["id"]), "pos": lm["pos"],
                       "rot": np.asarray(lm["rot"]).reshape(9),
                       "reliable": bool(lm.get("reliable", True))}
                      for lm in state.landmarks],
    }
    if params is not None:
        doc["params"] = params.to_dict()
    return doc


def save_deformed(state: DeformedState, path, params: DeformParams | None = None) -> None:
    _atomic_write(path, dumps_canonical(deformed_to_doc(state, params)))


def _rotation(values, where) -> np.ndarray:
    if not (isinstance(values, list) and len(values) == 9):
        raise StateFileError(f"{where}: rotation must have 9 values")
    r = np.array(values, dtype=np.float64).reshape(3, 3)
    err = np.linalg.norm(r.T @ r - np.eye(3))
    if not err < ORTHO_TOL:
        raise StateFileError(f"{where}: rotation not orthonormal (|R^T R - I| = {err:.3g})")
    if not np.linalg.det(r) > 0:
        raise StateFileError(f"{where}: rotation has negative determinant")
    return r


def load_deformed(path, relax: SampledState | None = None) -> DeformedState:
    doc = _read_json(path)
    _check_header(doc, DEFORMED_KIND, path)
    recs = _field(doc, "positions", path)
    rots = _field(doc, "rotations", path)
    n = len(recs)
    if len(rots) != n:
        raise StateFileError(f"{path}: {len(rots)} rotations for {n} positions")
    pos = np.empty((n, 3))
    rot = np.empty((n, 3, 3))
    for k, (prec, rrec) in enumerate(zip(recs, rots)):
        if prec.get("id") != k or rrec.get("id") != k:
            raise StateFileError(f"{path}: positions/rotations[{k}]: id out of order")
        p = prec.get("pos")
        if not (isinstance(p, list) and len(p) == 3):
            raise StateFileError(f"{path}: positions[{k}]: pos must have 3 values")
        pos[k] = p
        rot[k] = _rotation(rrec.get("rot"), f"{path}: rotations[{k}] (id {k})")
    landmarks = []
    for k, rec in enumerate(doc.get("landmarks", [])):
        where = f"{path}: landmarks[{k}]"
        p = rec.get("pos")
        if not (isinstance(p, list) and len(p) == 3):
            raise StateFileError(f"{where}: pos must have 3 values")
        landmarks.append({"id": int(rec.get("id", -1)), "pos": np.array(p, dtype=np.float64),
                          "rot": _rotation(rec.get("rot"), where),
                          "reliable": bool(rec.get("reliable", True))})
    relax_hash = str(_field(doc, "relax_hash", path))
    if relax is not None:
        if relax.n != n:
            raise StateFileError(f"{path}: {n} particles but the relax state has {relax.n}")
        if state_hash(relax) != relax_hash:
            raise StateFileError(f"{path}: relax_hash does not match the given relax state")
    return DeformedState(pos, rot, int(_field(doc, "iterations", path)),
                         float(_field(doc, "residual", path)),
                         bool(doc.get("converged", False)), relax_hash,
                         np.array(doc.get("degenerate", []), dtype=np.int64), landmarks)


def save_state(state, path, **kw) -> None:
    if isinstance(state, SampledState):
        save_sampled(state, path)
    elif isinstance(state, DeformedState):
        save_deformed(state, path, **kw)
    else:
        raise TypeError(f"cannot save {type(state).__name__}")


def load_state(path, relax: SampledState | None = None):
    """Load either file type, dispatching on the ``kind`` field."""
    kind = _read_json(path).get("kind")
    if kind == SAMPLED_KIND:
        return load_sampled(path)
    if kind == DEFORMED_KIND:
        return load_deformed(path, relax)
    raise StateFileError(f"{path}: unknown state kind {kind!r}")


# ---------------------------------------------------------------- CSV


BENCH_COLUMNS = ("N", "phase", "mean_ms", "std_ms")
EXPORTS = ("positions", "edges", "spacing_histogram", "bench")


def _write_csv(path, header, rows) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(prefix=path.name + ".", suffix=".tmp", dir=path.parent or ".")
    try:
        with os.fdopen(fd, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            w.writerows(rows)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _num(x):
    return repr(float(x))


def export_csv(state, what: str, path) -> None:
    """Write one CSV table.  ``state`` is a bench row list when ``what='bench'``."""
    if what not in EXPORTS:
        raise ValueError(f"unknown export {what!r}; choose from {', '.join(EXPORTS)}")
    if what == "bench":
        rows = [[int(r["N"]), r["phase"], _num(r["mean_ms"]), _num(r["std_ms"])] for r in state]
        _write_csv(path, BENCH_COLUMNS, rows)
    elif what == "positions":
        if isinstance(state, SampledState):
            rows = [[i, *map(_num, state.positions[i]), _num(state.radii[i]),
                     KIND_NAMES[int(state.kinds[i])]] for i in range(state.n)]
            _write_csv(path, ("id", "x", "y", "z", "radius", "kind"), rows)
        else:
            rows = [[i, *map(_num, state.positions[i])] for i in range(state.n)]
            _write_csv(path, ("id", "x", "y", "z"), rows)
    elif what == "edges":
        _require_sampled(state, what)
        e = state.graph.edges
        d = np.linalg.norm(state.positions[e[:, 0]] - state.positions[e[:, 1]], axis=1)
        ratio = d / (state.radii[e[:, 0]] + state.radii[e[:, 1]])
        rows = [[int(i), int(j), _num(dd), _num(rr)] for (i, j), dd, rr in zip(e, d, ratio)]
        _write_csv(path, ("i", "j", "distance", "ratio"), rows)
    else:
        _require_sampled(state, what)
        bins = state.diagnostics.get("spacing_bins", [])
        counts = state.diagnostics.get("spacing_counts", [])
        rows = [[_num(lo), _num(hi), int(c)] for lo, hi, c in zip(bins[:-1], bins[1:], counts)]
        _write_csv(path, ("bin_lo", "bin_hi", "count"), rows)


def _require_sampled(state, what):
    if not isinstance(state, SampledState):
        raise TypeError(f"'{what}' export needs a sampled state")
