"""Command-line interface: ``quadcsg reconstruct | evaluate | export-tree | synth``.

Exit codes: 0 success, 2 bad flags or configuration, 3 unreadable or
malformed input, 4 divergence or empty reconstruction.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import __version__, engine, extraction, metrics, sampling, shapes
from .engine import FitConfig
from .sampling import make_rng

log = logging.getLogger("quadcsg")

EXIT_OK, EXIT_USAGE, EXIT_INPUT, EXIT_FIT = 0, 2, 3, 4
MANIFEST_FORMAT = "quadcsg-manifest-v1"

# settings outside FitConfig that still shape the outputs
POINTCLOUD_GRID = 64
RUN_DEFAULTS = {
    "n_queries": 32768,
    "near_fraction": 0.5,
    "k_offsets": 8,
    "sigma": 1 / 64,
    "n_volume_queries": 32768,
    "resolution": extraction.DEFAULT_RESOLUTION,
    "n_uniform_validation": extraction.N_UNIFORM_VALIDATION,
}

OUTPUTS = {"mesh": "mesh.obj", "tree": "tree.json", "checkpoint": "model.ckpt",
           "manifest": "manifest.json"}


class UsageError(Exception):
    pass


def _parse_value(text: str):
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


def read_config_file(path) -> dict:
    """``key = value`` per line, ``#`` comments, blank lines ignored."""
    out = {}
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc.strerror}") from None
    for lineno, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in _FIT_FIELDS and key not in RUN_DEFAULTS:
            raise UsageError(f"{path}:{lineno}: unknown key {key!r}")
        out[key] = _parse_value(value)
    return out


_FIT_FIELDS = {f.name: f for f in fields(FitConfig)}


def _coerce(key, value):
    default = getattr(FitConfig(), key, RUN_DEFAULTS.get(key))
    if isinstance(default, bool):
        if isinstance(value, str):
            return value.lower() == "true"
        return bool(value)
    if isinstance(default, int) and not isinstance(value, bool):
        if isinstance(value, float) and not value.is_integer():
            raise UsageError(f"{key} must be an integer, got {value}")
        return int(value)
    if isinstance(default, float):
        return float(value)
    return value


def resolve_settings(flags: dict, config_path=None) -> tuple[FitConfig, dict]:
    """Defaults, then the config file, then explicit flags."""
    merged = dict(read_config_file(config_path)) if config_path else {}
    merged.update({k: v for k, v in flags.items() if v is not None})
    fit = {k: _coerce(k, v) for k, v in merged.items() if k in _FIT_FIELDS}
    run = dict(RUN_DEFAULTS)
    run.update({k: _coerce(k, v) for k, v in merged.items() if k in RUN_DEFAULTS})
    try:
        config = FitConfig(**fit).validate()
    except engine.ConfigError as exc:
        raise UsageError(str(exc)) from None
    return config, run


# ------------------------------------------------------------------ reconstruct


def load_queries(path, input_type, config: FitConfig, run: dict) -> sampling.QuerySet:
    rng = make_rng(config.seed, "queries")
    if input_type == "voxel":
        grid = sampling.load_voxel_grid(path)
        return sampling.sample_voxel_queries(grid, run["n_queries"], rng, run["near_fraction"])
    cloud = sampling.load_point_cloud(path)
    queries = sampling.sample_pointcloud_queries(cloud, run["k_offsets"], run["sigma"], rng)
    if run["n_volume_queries"] > 0:
        # offsets alone never leave the random initial state; add volume labels
        grid = sampling.voxelize_point_cloud(cloud, POINTCLOUD_GRID)
        volume = sampling.sample_voxel_queries(grid, run["n_volume_queries"], rng,
                                               run["near_fraction"])
        queries = sampling.merge_queries(queries, volume)
    return queries


def _write_atomic(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def run_reconstruction(input_path, input_type, out_dir, config: FitConfig, run: dict,
                       progress_every: int = 0) -> dict:
    """Fit, prune, extract and mesh one input; returns the manifest."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    queries = load_queries(input_path, input_type, config, run)
    log.info("%s: %d queries (%s)", input_path, len(queries), queries.source)

    def progress(state, loss):
        if progress_every and state.iteration % progress_every == 0:
            log.info("stage %d iter %d loss %.6f", state.stage, state.iteration, loss)

    stage_times = {}
    fitted = engine.reconstruct(queries, config, progress, stage_times)
    paths = {k: out_dir / v for k, v in OUTPUTS.items()}
    engine.save_checkpoint(paths["checkpoint"], fitted.state, queries)
    start = time.perf_counter()
    tree, pruned = derive_tree(fitted.hard, queries, config.seed, run["n_uniform_validation"])
    extraction.save_tree(tree, paths["tree"])
    mesh = extraction.mesh_model(pruned, run["resolution"])
    extraction.save_obj(mesh, paths["mesh"])
    post_time = time.perf_counter() - start

    trace = {str(s): [float(v) for st, _, _, v in fitted.trace if st == s] for s in range(3)}
    manifest = {
        "format": MANIFEST_FORMAT,
        "version": __version__,
        "command": "reconstruct",
        "input": {"path": str(Path(input_path).resolve()), "type": input_type,
                  "sha256": engine.file_digest(input_path)},
        "seed": config.seed,
        "config": asdict(config),
        "run": run,
        "rng": sampling.RNG_ALGORITHM,
        "queries": {"count": len(queries), **queries.meta},
        "loss_kind": {str(k): v for k, v in engine.LOSS_KIND.items()},
        "loss_trace": trace,
        "wall_clock_seconds": {**{f"stage{k}": v for k, v in stage_times.items()},
                               "extraction": post_time},
        "summary": {"primitives": tree.num_primitives, "convexes": tree.num_convexes,
                    "left_convexes": len(tree.left), "right_convexes": len(tree.right),
                    "mesh_vertices": len(mesh.vertices), "mesh_faces": len(mesh.faces)},
        "outputs": {k: {"path": str(p.resolve()),
                        "sha256": engine.file_digest(p)} for k, p in paths.items()
                    if k != "manifest"},
    }
    _write_atomic(paths["manifest"], json.dumps(manifest, indent=2) + "\n")
    return manifest


def derive_tree(model, queries, seed: int, n_uniform: int = extraction.N_UNIFORM_VALIDATION):
    points = extraction.validation_points(queries.points, make_rng(seed, "prune"), n_uniform)
    pruned = extraction.prune_primitives(model, points)
    return extraction.extract_csg_tree(pruned), pruned


def _job(args):
    input_path, input_type, out_dir, config, run, every = args
    try:
        run_reconstruction(input_path, input_type, out_dir, config, run, every)
        return EXIT_OK, f"{input_path}: wrote {out_dir}"
    except Exception as exc:  # mapped to exit codes below
        return _exit_code(exc), f"{input_path}: {_describe(exc)}"


def _exit_code(exc) -> int:
    if isinstance(exc, UsageError):
        return EXIT_USAGE
    if isinstance(exc, (engine.DivergenceError, extraction.EmptyReconstructionError)):
        return EXIT_FIT
    if isinstance(exc, (sampling.InputFormatError, engine.DegenerateInputError,
                        engine.CheckpointError, extraction.TreeFormatError,
                        OSError, ValueError)):
        return EXIT_INPUT
    raise exc


def _describe(exc) -> str:
    if isinstance(exc, FileNotFoundError):
        return f"no such file: {exc.filename}"
    return str(exc).splitlines()[0] if str(exc) else type(exc).__name__


def cmd_reconstruct(args) -> int:
    if args.replay:
        manifest = json.loads(Path(args.replay).read_text(encoding="utf-8"))
        if manifest.get("format") != MANIFEST_FORMAT:
            raise sampling.InputFormatError(f"{args.replay}: not a {MANIFEST_FORMAT} manifest")
        config = FitConfig.from_dict(manifest["config"]).validate()
        run = {**RUN_DEFAULTS, **manifest["run"]}
        inputs = [manifest["input"]["path"]]
        input_type = manifest["input"]["type"]
        out_dir = args.out_dir or str(Path(args.replay).parent)
        jobs = [(inputs[0], input_type, out_dir, config, run, args.progress_every)]
    else:
        if not args.input:
            raise UsageError("reconstruct needs --input (or --replay)")
        if not args.input_type:
            raise UsageError("reconstruct needs --input-type voxel|pointcloud")
        flags = {k: getattr(args, k, None) for k in list(_FIT_FIELDS) + list(RUN_DEFAULTS)}
        config, run = resolve_settings(flags, args.config)
        out_root = Path(args.out_dir or ".")
        multi = len(args.input) > 1
        jobs = [(path, args.input_type, out_root / Path(path).stem if multi else out_root,
                 config, run, args.progress_every) for path in args.input]
    if args.jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_job, jobs))
    else:
        results = [_job(j) for j in jobs]
    code = EXIT_OK
    for status, message in results:
        print(message if status == EXIT_OK else f"error: {message}",
              file=sys.stdout if status == EXIT_OK else sys.stderr)
        code = max(code, status)
    return code


# ------------------------------------------------------------------ evaluate


def load_surface(path, k: int, seed: int) -> metrics.SurfaceSampleSet:
    """Samples from an OBJ mesh, or up to ``k`` points of an xyz+normal file."""
    rng = make_rng(seed, "metrics")
    if str(path).lower().endswith(".obj"):
        mesh = extraction.load_obj(path)
        if len(mesh.faces) == 0:
            raise sampling.InputFormatError(f"{path}: mesh has no faces")
        return metrics.sample_surface(mesh, k, rng, str(path))
    points, normals = sampling.read_xyzn(path)
    if len(points) > k:
        idx = np.sort(rng.choice(len(points), k, replace=False))
        points, normals = points[idx], normals[idx]
    return metrics.SurfaceSampleSet(points, normals, str(path))


def _fmt(value: float) -> str:
    return f"{value:.6g}"


def cmd_evaluate(args) -> int:
    if not args.recon or not args.gt:
        raise UsageError("evaluate needs --recon and --gt")
    recon = load_surface(args.recon, args.samples, args.seed)
    gt = load_surface(args.gt, args.samples, args.seed)
    scores = metrics.evaluate_surfaces(recon, gt)
    p = c = "na"
    if args.tree:
        tree = extraction.load_tree(args.tree)
        p, c = tree.num_primitives, tree.num_convexes
    print(f"cd={_fmt(scores['cd'])} nc={_fmt(scores['nc'])} ecd={_fmt(scores['ecd'])} p={p} c={c}")
    return EXIT_OK


# ------------------------------------------------------------------ export-tree


def cmd_export_tree(args) -> int:
    state, queries = engine.load_checkpoint(args.checkpoint)
    if queries is None:
        raise engine.CheckpointError(f"{args.checkpoint}: no training queries stored")
    seed = state.config.seed if args.seed is None else args.seed
    fitted = engine.fitted_from_state(state)
    tree, _ = derive_tree(fitted.hard, queries, seed, args.n_uniform_validation)
    extraction.save_tree(tree, args.out)
    print(f"wrote {args.out} ({tree.num_primitives} primitives, {tree.num_convexes} convexes)")
    return EXIT_OK


# ------------------------------------------------------------------ synth


def cmd_synth(args) -> int:
    shape = shapes.SHAPES[args.shape]
    if args.pointcloud:
        pts, normals = shape.sample_surface(args.points, make_rng(args.seed, "queries"))
        sampling.save_point_cloud(pts, normals, args.out)
    else:
        sampling.save_voxel_grid(sampling.voxelize(shape.contains, args.resolution), args.out)
    print(f"wrote {args.out}")
    return EXIT_OK


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="quadcsg", description="Inverse CSG reconstruction with convex quadric primitives.")
    parser.add_argument("--version", action="version", version=f"quadcsg {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    rec = sub.add_parser("reconstruct", help="fit a CSG model to a voxel grid or point cloud")
    rec.add_argument("--input", action="append", help="input file (repeatable)")
    rec.add_argument("--input-type", choices=["voxel", "pointcloud"])
    rec.add_argument("--out-dir", help="output directory (default: current directory)")
    rec.add_argument("--config", help="optional 'key = value' settings file")
    rec.add_argument("--replay", help="re-run exactly what a manifest.json records")
    rec.add_argument("--jobs", type=int, default=1, help="fit several inputs in parallel")
    rec.add_argument("--progress-every", type=int, default=0, metavar="N",
                     help="log the loss every N iterations (with -v)")
    for name, f in _FIT_FIELDS.items():
        default = getattr(FitConfig(), name)
        kind = {bool: _bool_flag, int: int, float: float}.get(type(default), str)
        rec.add_argument("--" + name.replace("_", "-"), dest=name, type=kind, default=None,
                         help=f"(default {default})")
    for name, default in RUN_DEFAULTS.items():
        rec.add_argument("--" + name.replace("_", "-"), dest=name, type=type(default),
                         default=None, help=f"(default {default:g})")
    rec.set_defaults(subparser=rec, func=cmd_reconstruct)

    ev = sub.add_parser("evaluate", help="CD / NC / ECD between a reconstruction and ground truth")
    ev.add_argument("--recon", help="reconstructed mesh (.obj)")
    ev.add_argument("--gt", help="ground-truth mesh (.obj) or xyz+normal point file")
    ev.add_argument("--tree", help="tree.json, to report primitive and convex counts")
    ev.add_argument("--samples", type=int, default=metrics.DEFAULT_SAMPLES)
    ev.add_argument("--seed", type=int, default=0)
    ev.set_defaults(subparser=ev, func=cmd_evaluate)

    ex = sub.add_parser("export-tree", help="re-derive tree.json from a checkpoint")
    ex.add_argument("--checkpoint", required=True)
    ex.add_argument("--out", default="tree.json")
    ex.add_argument("--seed", type=int, default=None, help="pruning seed (default: fit seed)")
    ex.add_argument("--n-uniform-validation", type=int, default=extraction.N_UNIFORM_VALIDATION)
    ex.set_defaults(subparser=ex, func=cmd_export_tree)

    sy = sub.add_parser("synth", help="write a built-in test shape as voxels or a point cloud")
    sy.add_argument("--shape", choices=sorted(shapes.SHAPES), required=True)
    sy.add_argument("--out", required=True)
    sy.add_argument("--resolution", type=int, default=64)
    sy.add_argument("--pointcloud", action="store_true", help="write xyz+normal samples instead")
    sy.add_argument("--points", type=int, default=8192)
    sy.add_argument("--seed", type=int, default=0)
    sy.set_defaults(subparser=sy, func=cmd_synth)
    return parser


def _bool_flag(text: str) -> bool:
    low = text.lower()
    if low not in ("true", "false", "1", "0", "yes", "no"):
        raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")
    return low in ("true", "1", "yes")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with 2 on bad flags
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except UsageError as exc:
        getattr(args, "subparser", parser).print_usage(sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:
        code = _exit_code(exc)
        print(f"error: {_describe(exc)}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
