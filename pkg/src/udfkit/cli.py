"""Command-line entry point: ``udfkit {fit,reconstruct,normals,upsample,eval,fixtures,replay}``.

Each invocation writes into its own run directory (``--out``) together with a
``manifest.json`` that captures the full configuration, seeds and input hashes.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time

import numpy as np
import torch

from . import __version__
from .applications import UpsampleConfig, estimate_normals, upsample
from .errors import (CheckpointFormatError, ConfigError, DegenerateInputError, EmptyInputError,
                     NumericFailure, ParseError, PartialOutputError)
from .field import load_checkpoint, save_checkpoint
from .fixtures import KINDS, sample_surface, shape
from .geometry import (PointCloud, TriangleMesh, load_mesh, load_point_cloud, normalize, save_mesh,
                       save_ply, save_xyz, _read_ply)
from .mesher import extract_mesh
from .metrics import evaluate
from .trainer import (TrainConfig, TrainingAborted, checkpoint_for, config_from_mapping, fit,
                      parse_config_text)

log = logging.getLogger("udfkit")

EXIT_OK = 0
EXIT_IO = 3
EXIT_CONFIG = 4
EXIT_NUMERIC = 5
EXIT_DEGENERATE = 6


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _run_dir(path) -> str:
    os.makedirs(path, exist_ok=True)
    return path


def _write_manifest(out_dir, command, args: dict, inputs, outputs, seed=None, config=None,
                    started=None, extra=None):
    manifest = {
        "command": command,
        "args": args,
        "config": config,
        "inputs": {os.path.abspath(p): _sha256(p) for p in inputs},
        "seed": seed,
        "tool_version": __version__,
        "outputs": {k: os.path.abspath(v) for k, v in outputs.items()},
        "wall_clock": None if started is None else time.perf_counter() - started,
    }
    if extra:
        manifest.update(extra)
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return manifest


def _parse_overrides(pairs):
    out = {}
    for item in pairs or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _load_cloud_any(path) -> PointCloud:
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    return load_point_cloud(path)


def _load_geometry(path):
    """Mesh for OBJ / PLY-with-faces, point cloud otherwise."""
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    ext = os.path.splitext(path)[1].lower()
    if ext == ".obj":
        return load_mesh(path)
    if ext == ".ply":
        verts, faces = _read_ply(path)
        if faces is not None and len(faces):
            return load_mesh(path)
        return PointCloud(verts)
    return load_point_cloud(path)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_fit(args) -> int:
    started = time.perf_counter()
    cloud_raw = _load_cloud_any(args.input)
    if args.config_snapshot is not None:
        cfg = config_from_mapping(args.config_snapshot)
    else:
        values = {}
        if args.config:
            if not os.path.exists(args.config):
                raise FileNotFoundError(args.config)
            with open(args.config) as fh:
                values = parse_config_text(fh.read())
        values.update(_parse_overrides(args.set))
        cfg = config_from_mapping(values)
    cloud = normalize(cloud_raw)
    out = _run_dir(args.out)
    ckpt_path = os.path.join(out, "checkpoint.udf")
    trace_path = os.path.join(out, "trace.tsv")
    try:
        net, trace = fit(cloud, cfg)
    except TrainingAborted as exc:
        save_checkpoint(os.path.join(out, "last_good.udf"), exc.last_good)
        exc.trace.write(trace_path)
        _write_manifest(out, "fit", _replay_args(args), [args.input],
                        {"last_good": os.path.join(out, "last_good.udf"), "trace": trace_path},
                        seed=cfg.seed, config=cfg.to_dict(), started=started,
                        extra={"status": "numeric-failure", "error": str(exc)})
        raise
    save_checkpoint(ckpt_path, checkpoint_for(net, cloud, cfg))
    trace.checkpoint = ckpt_path
    trace.write(trace_path)
    _write_manifest(out, "fit", _replay_args(args), [args.input],
                    {"checkpoint": ckpt_path, "trace": trace_path}, seed=cfg.seed,
                    config=cfg.to_dict(), started=started,
                    extra={"status": "ok", "train_seconds": trace.wall_clock})
    print(ckpt_path)
    return EXIT_OK


def _field_from(path):
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    ck = load_checkpoint(path)
    return ck, ck.build()


def cmd_reconstruct(args) -> int:
    started = time.perf_counter()
    ck, net = _field_from(args.checkpoint)
    mesh = extract_mesh(net, resolution=args.resolution, activation_threshold=args.threshold)
    out = _run_dir(args.out)
    path = os.path.join(out, args.name)
    verts = mesh.vertices * ck.scale + ck.center
    if mesh.is_empty:
        # zero-byte file marks "nothing extracted" without faking geometry
        open(path, "wb").close()
        log.warning("no active cells produced triangles; wrote an empty file to %s", path)
    else:
        save_mesh(path, TriangleMesh(verts, mesh.triangles))
    _write_manifest(out, "reconstruct", _replay_args(args), [args.checkpoint], {"mesh": path},
                    started=started, extra={"empty": mesh.is_empty,
                                            "vertices": len(mesh.vertices),
                                            "triangles": len(mesh.triangles)})
    print(path)
    return EXIT_OK


def _cloud_in_frame(args, ck) -> PointCloud:
    raw = _load_cloud_any(args.input)
    return PointCloud((raw.points - ck.center) / ck.scale, center=ck.center, scale=ck.scale)


def cmd_normals(args) -> int:
    started = time.perf_counter()
    ck, net = _field_from(args.checkpoint)
    cloud = _cloud_in_frame(args, ck)
    est = estimate_normals(net, cloud)
    out = _run_dir(args.out)
    path = os.path.join(out, args.name)
    keep = est.valid
    save_xyz(path, cloud.denormalize(cloud.points[keep]), est.normals[keep])
    if (~keep).any():
        log.warning("%d points had a degenerate gradient and were left out", int((~keep).sum()))
    _write_manifest(out, "normals", _replay_args(args), [args.checkpoint, args.input],
                    {"normals": path}, started=started,
                    extra={"degenerate": int((~keep).sum())})
    print(path)
    return EXIT_OK


def cmd_upsample(args) -> int:
    started = time.perf_counter()
    ck, net = _field_from(args.checkpoint)
    cloud = _cloud_in_frame(args, ck)
    try:
        cfg = UpsampleConfig(factor=args.factor, beta=args.beta, max_rounds=args.max_rounds,
                             pull_steps=args.pull_steps)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    up = upsample(net, cloud, cfg, seed=args.seed)
    out = _run_dir(args.out)
    path = os.path.join(out, args.name)
    pts = up.denormalize(up.points)
    if path.endswith(".ply"):
        save_ply(path, pts)
    else:
        save_xyz(path, pts)
    _write_manifest(out, "upsample", _replay_args(args), [args.checkpoint, args.input],
                    {"points": path}, seed=args.seed, started=started, extra={"count": len(pts)})
    print(path)
    return EXIT_OK


def cmd_eval(args) -> int:
    started = time.perf_counter()
    pred = _load_geometry(args.pred)
    gt = _load_geometry(args.gt)
    rep = evaluate(pred, gt, thresholds=args.tau, samples=args.samples, seed=args.seed)
    out = _run_dir(args.out)
    table = os.path.join(out, "report.tsv")
    js = os.path.join(out, "report.json")
    rep.write_table(table)
    rep.write_json(js)
    _write_manifest(out, "eval", _replay_args(args), [args.pred, args.gt],
                    {"table": table, "json": js}, seed=args.seed, started=started)
    for name, v in rep.rows():
        print(f"{name}\t{v:.6g}")
    return EXIT_OK


def cmd_fixtures(args) -> int:
    started = time.perf_counter()
    out = _run_dir(args.out)
    outputs = {}
    for kind in KINDS:
        cloud = sample_surface(shape(kind), args.count, seed=args.seed, noise=args.noise)
        path = os.path.join(out, f"{kind}.xyz")
        save_xyz(path, cloud.points)
        outputs[kind] = path
    _write_manifest(out, "fixtures", _replay_args(args), [], outputs, seed=args.seed, started=started)
    for p in outputs.values():
        print(p)
    return EXIT_OK


def cmd_replay(args) -> int:
    if not os.path.exists(args.manifest):
        raise FileNotFoundError(args.manifest)
    with open(args.manifest) as fh:
        manifest = json.load(fh)
    ns = argparse.Namespace(**manifest["args"])
    ns.out = args.out
    ns.func = COMMANDS[manifest["command"]]
    if manifest["command"] == "fit":
        ns.config_snapshot = manifest["config"]
    return ns.func(ns)


COMMANDS = {
    "fit": cmd_fit, "reconstruct": cmd_reconstruct, "normals": cmd_normals,
    "upsample": cmd_upsample, "eval": cmd_eval, "fixtures": cmd_fixtures,
}


def _replay_args(args) -> dict:
    skip = {"func", "out", "config_snapshot", "threads", "verbose"}
    return {k: v for k, v in vars(args).items() if k not in skip}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="udfkit", description=__doc__.splitlines()[0])
    p.add_argument("--threads", type=int, default=1, help="worker threads for numeric kernels")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    f = sub.add_parser("fit", help="fit a field to a point cloud")
    f.add_argument("input", help="point cloud (.xyz or .ply)")
    f.add_argument("--config", help="flat key = value config file")
    f.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    f.add_argument("--out", required=True, help="run directory")
    f.set_defaults(func=cmd_fit, config_snapshot=None)

    r = sub.add_parser("reconstruct", help="extract a mesh from a checkpoint")
    r.add_argument("checkpoint")
    r.add_argument("--resolution", type=int, default=128)
    r.add_argument("--threshold", type=float, default=None,
                   help="activation threshold (default: two cell diagonals)")
    r.add_argument("--name", default="mesh.obj", help="output file name (.obj or .ply)")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_reconstruct)

    n = sub.add_parser("normals", help="estimate unoriented normals at cloud points")
    n.add_argument("checkpoint")
    n.add_argument("--input", required=True)
    n.add_argument("--name", default="normals.xyz")
    n.add_argument("--out", required=True)
    n.set_defaults(func=cmd_normals)

    u = sub.add_parser("upsample", help="upsample a cloud by pulling queries onto the surface")
    u.add_argument("checkpoint")
    u.add_argument("--input", required=True)
    u.add_argument("--factor", type=int, default=4)
    u.add_argument("--beta", type=float, default=0.05)
    u.add_argument("--max-rounds", type=int, default=10)
    u.add_argument("--pull-steps", type=int, default=1)
    u.add_argument("--seed", type=int, default=0)
    u.add_argument("--name", default="upsampled.xyz")
    u.add_argument("--out", required=True)
    u.set_defaults(func=cmd_upsample)

    e = sub.add_parser("eval", help="compare prediction and ground truth")
    e.add_argument("--pred", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--tau", type=float, action="append", default=None,
                   help="F-score threshold (repeatable; default 0.005 and 0.01)")
    e.add_argument("--samples", type=int, default=100_000)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    x = sub.add_parser("fixtures", help="write analytic test shapes as XYZ clouds")
    x.add_argument("--count", type=int, default=10_000)
    x.add_argument("--seed", type=int, default=0)
    x.add_argument("--noise", type=float, default=0.0)
    x.add_argument("--out", required=True)
    x.set_defaults(func=cmd_fixtures)

    rp = sub.add_parser("replay", help="re-run a command from its manifest")
    rp.add_argument("manifest")
    rp.add_argument("--out", required=True)
    rp.set_defaults(func=cmd_replay)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "tau", "absent") is None:
        args.tau = [0.005, 0.01]
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(max(1, args.threads))
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FileNotFoundError, PermissionError, IsADirectoryError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ParseError, CheckpointFormatError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except NumericFailure as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DegenerateInputError, EmptyInputError, PartialOutputError) as exc:
        print(f"degenerate input: {exc}", file=sys.stderr)
        return EXIT_DEGENERATE


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
