"""Command-line front end: phantom, sample, deform, track, bench, export.

Parameter values are resolved as: dataclass default < config file < environment
(``TISSUESIM_<KEY>`` or ``TISSUESIM_<COMMAND>_<KEY>``) < command-line flag.
The config file is flat ``key = value`` lines; a key may be prefixed with the
command name (``deform.dt = 0.05``) to apply to that command only.

Exit codes: 0 success, 1 usage or input error, 2 non-convergence.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import fields
from pathlib import Path

import numba
import numpy as np

from .deform import DeformError, DeformParams, Deformer, bind_controls, solve
from .index import build_index
from .landmark import LandmarkError, embed_landmark, track_landmark
from .sampler import SamplingError, SamplingParams, run_sampling
from .state_io import (EXPORTS, StateFileError, export_csv, load_deformed, load_sampled,
                       load_state, save_deformed, save_sampled)
from .surface import PHANTOM_KINDS, AffineMap, MeshError, load_mesh, make_phantom, \
    rotation_matrix, save_mesh

EXIT_OK, EXIT_USAGE, EXIT_NOT_CONVERGED = 0, 1, 2
ENV_PREFIX = "TISSUESIM_"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------- config


def read_config(path) -> dict:
    """Flat ``key = value`` file; ``#`` starts a comment."""
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected 'key = value'")
        k, v = (s.strip() for s in line.split("=", 1))
        out[k] = v
    return out


def _convert(raw, typ, key):
    try:
        if typ is bool:
            return str(raw).lower() in ("1", "true", "yes", "on")
        return typ(raw)
    except (TypeError, ValueError):
        raise UsageError(f"bad value for {key}: {raw!r}") from None


_TYPES = {"int": int, "float": float, "bool": bool, "str": str}


def resolve_params(cls, command: str, args, config: dict, env=None):
    """Build ``cls`` from defaults, config, environment and flags (in that order)."""
    env = os.environ if env is None else env
    values = {}
    for f in fields(cls):
        typ = _TYPES.get(str(f.type), type(f.default))
        for key in (f.name, f"{command}.{f.name}"):
            if key in config:
                values[f.name] = _convert(config[key], typ, key)
        for key in (f"{ENV_PREFIX}{f.name.upper()}", f"{ENV_PREFIX}{command.upper()}_{f.name.upper()}"):
            if key in env:
                values[f.name] = _convert(env[key], typ, key)
        flag = getattr(args, f.name, None)
        if flag is not None:
            values[f.name] = _convert(flag, typ, f"--{f.name}")
    try:
        return cls(**values)
    except ValueError as e:
        raise UsageError(str(e)) from None


def _add_param_flags(p, cls, skip=()):
    for f in fields(cls):
        if f.name in skip:
            continue
        p.add_argument(f"--{f.name}", default=None, metavar=f.name.upper(),
                       help=f"(default {f.default})")


def _vec(text: str, n: int = 3, name: str = "value") -> np.ndarray:
    try:
        v = np.array([float(x) for x in text.split(",")])
    except ValueError:
        raise UsageError(f"{name}: expected {n} comma-separated numbers, got {text!r}") from None
    if len(v) != n:
        raise UsageError(f"{name}: expected {n} comma-separated numbers, got {text!r}")
    return v


# ---------------------------------------------------------------- commands


def cmd_phantom(args, config) -> int:
    dims = _vec(args.dims, 3, "--dims") if "," in args.dims else float(args.dims)
    surface = make_phantom(args.kind, dims, args.subdiv)
    save_mesh(surface, args.out)
    print(f"wrote {args.out} ({surface.n_triangles} triangles)")
    matrix = np.eye(3)
    if args.affine:
        matrix = np.diag(_vec(args.affine, 3, "--affine"))
    if args.rotate:
        axis, _, deg = args.rotate.partition(":")
        if not deg:
            raise UsageError("--rotate: expected AXIS:DEGREES, e.g. 0,0,1:30")
        matrix = rotation_matrix(_vec(axis, 3, "--rotate axis"), float(deg)) @ matrix
    offset = _vec(args.translate, 3, "--translate") if args.translate else np.zeros(3)
    if args.affine or args.rotate or args.translate:
        deformed = make_phantom(args.kind, dims, args.subdiv, AffineMap.affine(matrix, offset))
        out = args.deformed_out or str(Path(args.out).with_name(
            Path(args.out).stem + "_deformed" + Path(args.out).suffix))
        save_mesh(deformed, out)
        print(f"wrote {out} ({deformed.n_triangles} triangles)")
    return EXIT_OK


def cmd_sample(args, config) -> int:
    params = resolve_params(SamplingParams, "sample", args, config)
    surface = load_mesh(args.mesh)
    state = run_sampling(surface, params)
    save_sampled(state, args.out)
    d = state.diagnostics
    print(f"wrote {args.out}: {state.n} particles, {d['edges']} edges, "
          f"{d['surface_particles']} surface, {d['iterations']} iterations, "
          f"converged={d['converged']}")
    if d["underconnected"]:
        print(f"warning: {d['underconnected']} particles have fewer than 3 neighbours",
              file=sys.stderr)
    return EXIT_OK if d["converged"] else EXIT_NOT_CONVERGED


def cmd_deform(args, config) -> int:
    params = resolve_params(DeformParams, "deform", args, config)
    if args.track and not args.source_mesh:
        raise UsageError("--track needs --source-mesh (the relax surface)")
    relax = load_sampled(args.relax)
    deformed_mesh = load_mesh(args.mesh)
    source = load_mesh(args.source_mesh) if args.source_mesh else None
    constraints = bind_controls(relax, deformed_mesh, source)
    warm = load_deformed(args.warm_start, relax) if args.warm_start else None
    out = solve(relax, constraints, params, warm_start=warm)
    if args.track:
        lm = embed_landmark(relax, _vec(args.track, 3, "--track"), build_index(source))
        pose = track_landmark(relax, out, lm)
        out.landmarks.append({"id": lm.particle, "pos": pose.position, "rot": pose.rotation,
                              "reliable": pose.reliable})
    save_deformed(out, args.out, params)
    print(f"wrote {args.out}: {out.iterations} iterations, residual {out.residual:.3g}, "
          f"converged={out.converged}")
    return EXIT_OK if out.converged else EXIT_NOT_CONVERGED


def cmd_track(args, config) -> int:
    relax = load_sampled(args.relax)
    deformed = load_deformed(args.deformed, relax)
    source = load_mesh(args.source_mesh)
    if source.content_hash() != relax.mesh_hash:
        raise UsageError("--source-mesh does not match the relax state's mesh")
    lm = embed_landmark(relax, _vec(args.point, 3, "--point"), build_index(source))
    pose = track_landmark(relax, deformed, lm)
    doc = {"particle": lm.particle, "position": pose.position.tolist(),
           "rotation": pose.rotation.tolist(), "reliable": pose.reliable}
    text = json.dumps(doc, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return EXIT_OK


def linear_fit(x, y) -> dict:
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    slope, intercept = np.polyfit(x, y, 1)
    pred = slope * x + intercept
    ss_res = float(((y - pred) ** 2).sum())
    ss_tot = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return {"slope": float(slope), "intercept": float(intercept), "r2": r2}


def run_bench(sizes, reps: int, warmup: int, sample_reps: int = 1, subdiv: int = 3,
              seed: int = 0, squash: float = 0.99, log=None) -> list[dict]:
    """Time full sampling and a single deformation iteration for each N."""
    sphere = make_phantom("sphere", 1.0, subdiv)
    squashed = make_phantom("sphere", 1.0, subdiv,
                            AffineMap.affine(np.diag([1.0, 1.0, squash]), np.zeros(3)))
    index = build_index(sphere)
    rows = []
    for n in sizes:
        params = SamplingParams(N=int(n), seed=seed)
        times = []
        for _ in range(sample_reps):
            t0 = time.perf_counter()
            relax = run_sampling(index, params)
            times.append((time.perf_counter() - t0) * 1e3)
        rows.append({"N": int(n), "phase": "sampling", "mean_ms": float(np.mean(times)),
                     "std_ms": float(np.std(times))})
        eng = Deformer(relax, DeformParams())
        cons = bind_controls(relax, squashed, sphere)
        ids = np.array([c.particle for c in cons])
        tgt = np.array([c.target for c in cons])
        q = relax.positions.copy()
        q[ids] = tgt
        step_times = []
        for k in range(warmup + reps):
            t0 = time.perf_counter()
            _, force = eng.evaluate(q)
            q = eng.move(q, force, ids, tgt)
            if k >= warmup:
                step_times.append((time.perf_counter() - t0) * 1e3)
        rows.append({"N": int(n), "phase": "deform_step", "mean_ms": float(np.mean(step_times)),
                     "std_ms": float(np.std(step_times))})
        if log:
            log(f"N={n}: sampling {rows[-2]['mean_ms']:.1f} ms, "
                f"deform step {rows[-1]['mean_ms']:.2f} ms")
    return rows


def bench_summary(rows) -> dict:
    out = {}
    for phase in ("sampling", "deform_step"):
        sel = [r for r in rows if r["phase"] == phase]
        if len(sel) >= 2:
            out[phase] = linear_fit([r["N"] for r in sel], [r["mean_ms"] for r in sel])
    return out


def cmd_bench(args, config) -> int:
    sizes = [int(x) for x in args.sizes.split(",")]
    if sizes != sorted(sizes) or len(set(sizes)) != len(sizes) or min(sizes) < 4:
        raise UsageError("--sizes must be strictly ascending particle counts >= 4")
    if args.reps < 1 or args.warmup < 0 or args.sample_reps < 1:
        raise UsageError("--reps and --sample-reps must be >= 1, --warmup >= 0")
    rows = run_bench(sizes, args.reps, args.warmup, args.sample_reps, args.subdiv, args.seed,
                     log=lambda m: print(m, file=sys.stderr))
    export_csv(rows, "bench", args.out)
    summary = bench_summary(rows)
    text = json.dumps(summary, sort_keys=True, indent=2)
    if args.summary:
        Path(args.summary).write_text(text + "\n")
    print(text)
    return EXIT_OK


def cmd_export(args, config) -> int:
    if args.what == "bench":
        raise UsageError("bench tables are written by the 'bench' command")
    export_csv(load_state(args.state), args.what, args.out)
    print(f"wrote {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="tissuesim", description=__doc__.splitlines()[0])
    ap.add_argument("--config", help="flat key = value parameter file")
    ap.add_argument("--threads", type=int, default=1,
                    help="worker threads (kernels are sequential; kept for reproducibility)")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("phantom", help="write a synthetic mesh and optional deformed copy")
    p.add_argument("--kind", choices=PHANTOM_KINDS, required=True)
    p.add_argument("--dims", default="1", help="radius, or a,b,c radii / edge lengths")
    p.add_argument("--subdiv", type=int, default=3)
    p.add_argument("--affine", help="sx,sy,sz axis scales for the deformed copy")
    p.add_argument("--rotate", help="AXIS:DEGREES rotation for the deformed copy")
    p.add_argument("--translate", help="x,y,z translation for the deformed copy")
    p.add_argument("--out", required=True)
    p.add_argument("--deformed-out")
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("sample", help="fill a mesh with relaxed particles")
    p.add_argument("--mesh", required=True)
    p.add_argument("--out", required=True)
    _add_param_flags(p, SamplingParams)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("deform", help="solve the particle state for a deformed surface")
    p.add_argument("--relax", required=True, help="sampled state file")
    p.add_argument("--mesh", required=True, help="deformed surface (same topology)")
    p.add_argument("--source-mesh", help="surface the relax state was sampled from")
    p.add_argument("--warm-start", help="previous deformed state to start from")
    p.add_argument("--track", help="x,y,z landmark to track (needs --source-mesh)")
    p.add_argument("--out", required=True)
    _add_param_flags(p, DeformParams)
    p.set_defaults(func=cmd_deform)

    p = sub.add_parser("track", help="report a landmark's pose in a deformed state")
    p.add_argument("--relax", required=True)
    p.add_argument("--deformed", required=True)
    p.add_argument("--source-mesh", required=True)
    p.add_argument("--point", required=True, help="x,y,z in the relax configuration")
    p.add_argument("--out")
    p.set_defaults(func=cmd_track)

    p = sub.add_parser("bench", help="runtime sweep over particle counts")
    p.add_argument("--sizes", default=",".join(str(n) for n in range(1000, 10001, 1000)))
    p.add_argument("--reps", type=int, default=100)
    p.add_argument("--warmup", type=int, default=5)
    p.add_argument("--sample-reps", type=int, default=1)
    p.add_argument("--subdiv", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="CSV path")
    p.add_argument("--summary", help="JSON path for the linear fits")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("export", help="write a CSV table from a state file")
    p.add_argument("--state", required=True)
    p.add_argument("--what", choices=[e for e in EXPORTS if e != "bench"], required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export)
    return ap


def _check_paths(args) -> None:
    ins = [getattr(args, k, None) for k in ("mesh", "relax", "source_mesh", "warm_start",
                                            "deformed", "state")]
    outs = [getattr(args, k, None) for k in ("out", "deformed_out", "summary")]
    outs = [Path(o).resolve() for o in outs if o]
    if len(set(outs)) != len(outs):
        raise UsageError("output paths must be distinct")
    for i in ins:
        if i and Path(i).resolve() in outs:
            raise UsageError(f"output would overwrite input {i}")


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        if args.threads < 1:
            raise UsageError("--threads must be >= 1")
        _set_threads(args.threads)
        config = read_config(args.config) if args.config else {}
        _check_paths(args)
        return args.func(args, config)
    except UsageError as e:
        print(f"tissuesim: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (MeshError, StateFileError, DeformError, SamplingError, LandmarkError,
            OSError, ValueError) as e:
        print(f"tissuesim: error: {e}", file=sys.stderr)
        return EXIT_USAGE


def _set_threads(k: int) -> None:
    # the compiled kernels are sequential; the setting only matters for numba's
    # own parallel helpers, so leave the threading layer untouched at k = 1
    if k > 1:
        numba.config.THREADING_LAYER = "workqueue"
        numba.set_num_threads(min(k, numba.config.NUMBA_NUM_THREADS))


if __name__ == "__main__":
    sys.exit(main())
