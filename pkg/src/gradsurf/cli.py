"""`gradsurf` command line: fit, normals, denoise, reconstruct, eval, synth.

Exit codes: 0 ok; 2 input/format/config error; 3 non-finite loss;
4 checkpoint/config architecture mismatch; 5 empty level set.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .config import (Config, apply_overrides, describe_keys, desk_config, dump_config, from_flat, load_config,
                     parse_text, to_flat)
from .errors import (ArchitectureMismatch, ConfigInvalid, CorruptCheckpoint, DegenerateCloud, EmptyLevelSet,
                     FormatError, GradSurfError, InvalidXi, LengthMismatch, NonFiniteLoss)
from .evaluation import DEFAULT_THRESHOLDS, EvalReport, chamfer, corrupt, evaluate_normals, point_to_mesh, pooled_stats
from .field import load_checkpoint
from .geometry import NormalizationTransform, PointCloud, normalize
from .inference import TriangleMesh, denoise, extract_mesh, infer_normals
from .io import read_cloud, read_mesh, write_cloud, write_mesh_ply, write_obj
from .synthetic import SHAPES, SyntheticShape
from .trainer import fit

SEED_ENV = "GRADSURF_SEED"
MANIFEST = "manifest.json"
EXIT_OK, EXIT_INPUT, EXIT_NONFINITE, EXIT_ARCH, EXIT_EMPTY = 0, 2, 3, 4, 5
ORACLE_SAMPLES = 200_000

log = logging.getLogger("gradsurf")


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def write_manifest(out_dir: Path, argv, cfg: Config, inputs: dict, artifacts: dict, seconds: float,
                   extra: dict | None = None) -> dict:
    """One manifest per output directory. `digest` hashes everything except wall-clock."""
    body = {
        "tool": "gradsurf",
        "version": __version__,
        "command": list(argv),
        "config": to_flat(cfg),
        "seeds": {"master": cfg.train.seed},
        "inputs": {k: {"path": str(p), "sha256": _sha256(p)} for k, p in sorted(inputs.items())},
        "artifacts": {k: {"path": Path(p).name, "sha256": _sha256(p)} for k, p in sorted(artifacts.items())},
        "shards": 1,
        "threads": torch.get_num_threads(),
    }
    if extra:
        body["extra"] = extra
    body["digest"] = hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()
    body["wall_clock_seconds"] = round(seconds, 3)
    (out_dir / MANIFEST).write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")
    return body


# -- configuration plumbing -------------------------------------------------

def _embedded_config(header: dict) -> dict:
    out = {}
    for k, v in header.items():
        if k.startswith("cfg."):
            out[k[4:]] = ("true" if v else "false") if isinstance(v, bool) else str(v)
    return out


def resolve_config(args, base: Config | None = None) -> Config:
    """defaults (or --desk / checkpoint) < --config file < GRADSURF_SEED < --set < --seed."""
    cfg = base if base is not None else (desk_config() if getattr(args, "desk", False) else Config())
    if getattr(args, "config", None):
        cfg = load_config(args.config, cfg)
    env = os.environ.get(SEED_ENV)
    if env not in (None, ""):
        try:
            cfg = replace(cfg, train=replace(cfg.train, seed=int(env)))
        except ValueError:
            raise ConfigInvalid(f"{SEED_ENV}={env!r} is not an integer") from None
    cfg = apply_overrides(cfg, getattr(args, "set", None))
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, train=replace(cfg.train, seed=args.seed))
    return cfg


def _field_requested(args) -> bool:
    keys = [item.split("=", 1)[0].strip() for item in (getattr(args, "set", None) or ())]
    if getattr(args, "config", None):
        try:
            keys += list(parse_text(Path(args.config).read_text(), str(args.config)))
        except OSError as exc:
            raise ConfigInvalid(f"cannot read config {args.config}: {exc.strerror or exc}") from exc
    return any(k.startswith("field.") for k in keys)


def _load_model(args):
    """Checkpoint -> (network, transform, config). Architecture is checked whenever the
    user supplies field.* keys."""
    base_ckpt = load_checkpoint(args.checkpoint)
    base = from_flat(_embedded_config(base_ckpt.header))
    cfg = resolve_config(args, base)
    ckpt = load_checkpoint(args.checkpoint, expect=cfg.train.field) if _field_requested(args) else base_ckpt
    h = ckpt.header
    if "norm.scale" in h:
        tf = NormalizationTransform(np.array([float(h["norm.cx"]), float(h["norm.cy"]), float(h["norm.cz"])]),
                                    float(h["norm.scale"]))
    else:
        tf = NormalizationTransform.identity()
    return ckpt.network(), tf, cfg


def _apply_threads(n):
    n = n or os.cpu_count() or 1
    torch.set_num_threads(n)
    if n > 1:
        print(f"note: {n} threads; bit-identical reruns are only guaranteed with --threads 1", file=sys.stderr)


def _out_dir(path) -> Path:
    out = Path(path)
    if out.exists() and not out.is_dir():
        raise FormatError(out, "output path exists and is not a directory")
    out.mkdir(parents=True, exist_ok=True)
    return out


# -- subcommands ------------------------------------------------------------

def cmd_fit(args, argv) -> int:
    t0 = time.perf_counter()
    cfg = resolve_config(args)
    raw = read_cloud(args.input)
    cloud, tf = normalize(raw)
    cfg.validate(len(cloud))
    out = _out_dir(args.output)
    header = {"norm.cx": float(tf.center[0]), "norm.cy": float(tf.center[1]), "norm.cz": float(tf.center[2]),
              "norm.scale": float(tf.scale)}
    header.update({f"cfg.{k}": v for k, v in to_flat(cfg).items()})
    (out / "config.txt").write_text(dump_config(cfg))
    _, report = fit(cloud, cfg.train, out_dir=out, header=header, log_every=args.log_every)
    artifacts = {"checkpoint": report.checkpoint_path, "losses": out / "losses.csv", "config": out / "config.txt"}
    for p in sorted(out.glob("checkpoint_*.bin")):
        artifacts[p.stem] = p
    final = report.final
    extra = {"iterations_run": len(report.history), "degenerate_total": report.degenerate_total,
             "assumptions": report.assumptions}
    if final is not None:
        extra["final_total"] = final.total
    write_manifest(out, argv, cfg, {"input": args.input}, artifacts, time.perf_counter() - t0, extra)
    print(f"wrote {report.checkpoint_path} ({len(report.history)} iterations)")
    return EXIT_OK


def _model_cloud(args):
    net, tf, cfg = _load_model(args)
    raw = read_cloud(args.input)
    cloud = PointCloud(tf.apply(raw.points), raw.gt_normals, raw.name)
    return net, tf, cfg, raw, cloud


def cmd_normals(args, argv) -> int:
    t0 = time.perf_counter()
    net, tf, cfg, raw, cloud = _model_cloud(args)
    inf = cfg.inference
    if args.kappa is not None:
        inf = replace(inf, kappa=args.kappa)
    if args.theta is not None:
        inf = replace(inf, theta=args.theta)
    if args.no_aggregate:
        inf = replace(inf, aggregate=False)
    cfg = replace(cfg, inference=inf)
    result = infer_normals(net, cloud, config=inf, xi=cfg.train.xi, seed=cfg.train.seed)
    out = _out_dir(args.output)
    path = out / f"normals.{args.format}"
    write_cloud(path, raw.points, result.normals)
    prov = {k: int(np.sum(result.provenance == k)) for k in ("aggregated", "raw-gradient")}
    write_manifest(out, argv, cfg, {"checkpoint": args.checkpoint, "input": args.input}, {"normals": path},
                   time.perf_counter() - t0, {"provenance": prov, "degenerate_count": result.degenerate_count})
    print(f"wrote {path}")
    return EXIT_OK


def cmd_denoise(args, argv) -> int:
    t0 = time.perf_counter()
    net, tf, cfg, raw, cloud = _model_cloud(args)
    if args.rounds < 1:
        raise ConfigInvalid("--rounds must be >= 1")
    moved = denoise(net, cloud, rounds=args.rounds)
    out = _out_dir(args.output)
    path = out / f"denoised.{args.format}"
    write_cloud(path, tf.inverse(moved.points))
    write_manifest(out, argv, cfg, {"checkpoint": args.checkpoint, "input": args.input}, {"denoised": path},
                   time.perf_counter() - t0, {"rounds": args.rounds})
    print(f"wrote {path}")
    return EXIT_OK


def cmd_reconstruct(args, argv) -> int:
    t0 = time.perf_counter()
    net, tf, cfg = _load_model(args)
    grid = cfg.mesh
    if args.resolution is not None:
        grid = replace(grid, resolution=tuple(args.resolution))
    if args.bounds is not None:
        grid = replace(grid, bounds=tuple(args.bounds))
    cfg = replace(cfg, mesh=grid)
    mesh = extract_mesh(net, grid).transformed(tf)
    out = _out_dir(args.output)
    ply, obj = out / "mesh.ply", out / "mesh.obj"
    write_mesh_ply(ply, mesh.vertices, mesh.faces)
    write_obj(obj, mesh.vertices, mesh.faces, mesh.vertex_normals())
    write_manifest(out, argv, cfg, {"checkpoint": args.checkpoint}, {"mesh_ply": ply, "mesh_obj": obj},
                   time.perf_counter() - t0,
                   {"vertices": len(mesh.vertices), "faces": len(mesh.faces),
                    "euler_characteristic": mesh.euler_characteristic()})
    print(f"wrote {ply} ({len(mesh.faces)} faces, euler characteristic {mesh.euler_characteristic()})")
    return EXIT_OK


def _parse_shape(spec: str) -> SyntheticShape:
    kind, _, params = spec.partition(":")
    kw = {}
    for item in filter(None, params.split(",")):
        k, _, v = item.partition("=")
        kw[k.strip()] = float(v)
    try:
        return SyntheticShape(kind, **kw)
    except (TypeError, ValueError) as exc:
        raise ConfigInvalid(f"bad shape spec {spec!r}: {exc}") from None


def cmd_eval(args, argv) -> int:
    t0 = time.perf_counter()
    if (args.gt is None) == (args.shape is None):
        raise ConfigInvalid("give exactly one of --gt or --shape")
    est = read_cloud(args.estimate)
    inputs = {"estimate": args.estimate}
    meta = {"analytic_oracle": args.shape is not None, "rmse_averaging": "single shape (per-shape value)"}
    if args.shape is not None:
        shape = _parse_shape(args.shape)
        ref_pts = shape.sample(args.oracle_samples, seed=args.seed)
        gt_normals = shape.normal(est.points)
        meta["shape"] = args.shape
        meta["oracle_samples"] = args.oracle_samples
    else:
        gt = read_cloud(args.gt)
        inputs["gt"] = args.gt
        ref_pts, gt_normals = gt.points, gt.gt_normals
    thresholds = tuple(args.thresholds) if args.thresholds else DEFAULT_THRESHOLDS
    if est.gt_normals is not None and gt_normals is not None:
        if len(est.gt_normals) != len(gt_normals):
            raise LengthMismatch(f"{args.estimate} has {len(est.gt_normals)} normals, reference has {len(gt_normals)}")
        report = evaluate_normals(est.gt_normals, gt_normals, thresholds, meta)
        report.metadata.update(pooled_stats(est.gt_normals, gt_normals))
    else:
        meta["normals"] = "not evaluated: estimate or reference lacks normals"
        report = EvalReport(None, None, [], metadata=meta)
    report.chamfer_l1 = chamfer(est.points, ref_pts, "L1")
    report.chamfer_l2 = chamfer(est.points, ref_pts, "L2")
    if args.mesh:
        v, f = read_mesh(args.mesh)
        inputs["mesh"] = args.mesh
        report.p2m = point_to_mesh(ref_pts if args.shape is None else shape.sample(20000, seed=args.seed),
                                   TriangleMesh(v, f))
    out = _out_dir(args.output)
    report.write(out)
    artifacts = {"json": out / "report.json", "table": out / "report.txt", "pgp": out / "report_pgp.csv"}
    cfg = replace(Config(), train=replace(Config().train, seed=args.seed))
    write_manifest(out, argv, cfg, inputs, artifacts, time.perf_counter() - t0)
    sys.stdout.write(report.table())
    return EXIT_OK


def cmd_synth(args, argv) -> int:
    shape = _parse_shape(args.shape)
    cloud = shape.cloud(args.count, seed=args.seed)
    if args.protocol:
        # noise is defined relative to the clean cloud's bounding box
        cloud = corrupt(cloud, args.protocol, seed=args.seed)
    path = Path(args.output)
    path.parent.mkdir(parents=True, exist_ok=True)
    write_cloud(path, cloud.points, cloud.gt_normals)
    print(f"wrote {path} ({len(cloud)} points)")
    return EXIT_OK


# -- parser -----------------------------------------------------------------

def _common(p, model=False):
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key (repeatable)")
    p.add_argument("--seed", type=int, help=f"master seed (wins over ${SEED_ENV} and config)")
    p.add_argument("--threads", type=int, default=None, help="torch intra-op threads (default: all cores)")
    if model:
        p.add_argument("checkpoint", help="checkpoint written by `fit`")


def build_parser() -> argparse.ArgumentParser:
    epilog = "config keys (current defaults):\n" + describe_keys()
    fmt = argparse.RawDescriptionHelpFormatter
    parser = argparse.ArgumentParser(prog="gradsurf", description="Fit an implicit field to a point cloud and "
                                     "derive normals, denoised points and meshes.", epilog=epilog,
                                     formatter_class=fmt)
    parser.add_argument("--version", action="version", version=f"gradsurf {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="train a field on one cloud", epilog=epilog, formatter_class=fmt)
    p.add_argument("input", help="point cloud (.xyz / .ply)")
    p.add_argument("-o", "--output", required=True, help="output directory")
    p.add_argument("--desk", action="store_true", help="start from the reduced single-core configuration")
    p.add_argument("--log-every", type=int, default=0, help="log losses every N steps (with -v)")
    _common(p)
    p.set_defaults(run=cmd_fit)

    p = sub.add_parser("normals", help="oriented normals from a trained field", epilog=epilog, formatter_class=fmt)
    _common(p, model=True)
    p.add_argument("input", help="point cloud the field was trained on")
    p.add_argument("-o", "--output", required=True, help="output directory")
    p.add_argument("--kappa", type=int, help="neighbors aggregated per point")
    p.add_argument("--theta", type=float, help="aggregation angle scale in radians")
    p.add_argument("--no-aggregate", action="store_true", help="report raw field gradients")
    p.add_argument("--format", choices=("ply", "xyz"), default="ply")
    p.set_defaults(run=cmd_normals)

    p = sub.add_parser("denoise", help="project points onto the zero level set", epilog=epilog,
                       formatter_class=fmt)
    _common(p, model=True)
    p.add_argument("input", help="point cloud to move")
    p.add_argument("-o", "--output", required=True, help="output directory")
    p.add_argument("--rounds", type=int, default=1)
    p.add_argument("--format", choices=("ply", "xyz"), default="ply")
    p.set_defaults(run=cmd_denoise)

    p = sub.add_parser("reconstruct", help="marching-cubes mesh of the zero level set", epilog=epilog,
                       formatter_class=fmt)
    _common(p, model=True)
    p.add_argument("-o", "--output", required=True, help="output directory")
    p.add_argument("--resolution", type=int, nargs="+", help="grid samples per axis (1 or 3 ints)")
    p.add_argument("--bounds", type=float, nargs="+", help="grid box in model units: lo hi, or 6 numbers")
    p.set_defaults(run=cmd_reconstruct)

    p = sub.add_parser("eval", help="normal / distance metrics against a reference", epilog=epilog,
                       formatter_class=fmt)
    p.add_argument("estimate", help="estimated cloud (normals read from nx ny nz columns)")
    p.add_argument("--gt", help="reference cloud with normals, point-aligned with the estimate")
    p.add_argument("--shape", help=f"analytic reference, e.g. sphere or torus:major=0.7 ({', '.join(SHAPES)})")
    p.add_argument("--mesh", help="mesh to score with point-to-mesh distance")
    p.add_argument("-o", "--output", required=True, help="output directory")
    p.add_argument("--thresholds", type=float, nargs="+", help="PGP thresholds in degrees")
    p.add_argument("--oracle-samples", type=int, default=ORACLE_SAMPLES)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=None)
    p.set_defaults(run=cmd_eval)

    p = sub.add_parser("synth", help="write a synthetic cloud with analytic normals", epilog=epilog,
                       formatter_class=fmt)
    p.add_argument("shape", help=f"one of {', '.join(SHAPES)}, optional params kind:key=value,...")
    p.add_argument("-o", "--output", required=True, help="output file (.xyz / .ply)")
    p.add_argument("--count", type=int, default=5000)
    p.add_argument("--protocol", choices=("noise_low", "noise_med", "noise_high", "stripe", "gradient"))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=None)
    p.set_defaults(run=cmd_synth)
    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        _apply_threads(args.threads)
        return args.run(args, ["gradsurf", *argv])
    except NonFiniteLoss as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NONFINITE
    except ArchitectureMismatch as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ARCH
    except EmptyLevelSet as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_EMPTY
    except (FormatError, ConfigInvalid, CorruptCheckpoint, DegenerateCloud, InvalidXi, LengthMismatch,
            GradSurfError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
