"""Command line entry point: ``generate | run | eval | mesh``."""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
import time
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, setup_logging
from .evaluation import (ate_rmse, chamfer_metrics, cull_mesh, depth_l1, extract_mesh,
                         observed_surface_points)
from .geometry import read_trajectory
from .slam import SLAM, SlamConfig, restore_scene
from .synthetic import DEFAULT_INTRINSICS, SCENES, Dataset, TrajectorySpec, generate_dataset

log = logging.getLogger("triplane_slam")

ABLATIONS = ("grid_hash", "single_map", "no_ba", "paper_literal_tsdf")


def _key_value(text: str) -> tuple[str, str]:
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"expected key=value, got {text!r}")
    k, v = text.split("=", 1)
    return k.strip(), v.strip()


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="triplane-slam", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="render a synthetic RGB-D sequence")
    g.add_argument("--scene", default="box-room", choices=sorted(SCENES))
    g.add_argument("--frames", type=int, default=100)
    g.add_argument("--trajectory", default="orbit", choices=("orbit", "lissajous"))
    g.add_argument("--depth-noise", type=float, default=0.0, help="depth noise std in meters")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)

    r = sub.add_parser("run", help="track and map a dataset")
    r.add_argument("--data", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--config", help="flat key = value file")
    r.add_argument("--seed", type=int)
    r.add_argument("--frames", type=int, help="process only the first N frames")
    r.add_argument("--precision", choices=("double", "single"))
    for name in ABLATIONS:
        r.add_argument("--" + name.replace("_", "-"), action="store_true", default=None)
    r.add_argument("--set", action="append", type=_key_value, default=[], metavar="KEY=VALUE",
                   help="override any config key")

    e = sub.add_parser("eval", help="trajectory and reconstruction metrics as JSON")
    e.add_argument("--gt", required=True, help="ground-truth trajectory")
    e.add_argument("--est", required=True, help="estimated trajectory")
    e.add_argument("--run", help="run directory; adds depth L1 and mesh metrics")
    e.add_argument("--data", help="dataset directory (needed with --run)")
    e.add_argument("--voxel", type=float, default=0.02)
    e.add_argument("--stride", type=int, default=1, help="frame and pixel stride for depth L1")

    m = sub.add_parser("mesh", help="extract and cull a mesh from a run")
    m.add_argument("--run", required=True)
    m.add_argument("--data", required=True)
    m.add_argument("--out", required=True)
    m.add_argument("--voxel", type=float, default=0.02)
    m.add_argument("--no-cull", action="store_true")
    return ap


def cmd_generate(args) -> int:
    scene = SCENES[args.scene]()
    traj = TrajectorySpec(kind=args.trajectory, frames=args.frames)
    generate_dataset(scene, traj, DEFAULT_INTRINSICS, args.out, args.depth_noise, args.seed)
    print(f"wrote {args.frames} frames to {args.out}")
    return 0


def cmd_run(args) -> int:
    overrides = dict(args.set)
    overrides.update(data=args.data, out=args.out, seed=args.seed, precision=args.precision)
    for name in ABLATIONS:
        overrides[name] = getattr(args, name)
    cfg = RunConfig.build(args.config, overrides)
    ds = Dataset(cfg.data)
    out = Path(cfg.out)
    cfg.echo(out)
    slam = SLAM(ds.intr, cfg.slam)
    n = len(ds) if args.frames is None else min(args.frames, len(ds))
    t0 = time.perf_counter()
    for i in range(n):
        slam.process(ds[i])
        log.info("frame %d/%d", i + 1, n)
    slam.save(out)
    print(f"processed {n} frames in {time.perf_counter() - t0:.1f} s; results in {out}")
    return 0


def _frame_depths(ds: Dataset, n: int) -> list[np.ndarray]:
    return [ds[i].depth for i in range(n)]


def cmd_eval(args) -> int:
    _, gt = read_trajectory(args.gt)
    _, est = read_trajectory(args.est)
    result = {"ate_rmse_cm": ate_rmse(est, gt)}
    if args.run:
        if not args.data:
            raise ConfigError("--run needs --data")
        ds = Dataset(args.data)
        scene = restore_scene(Path(args.run) / "checkpoint")
        cfg = _run_config(args.run)
        n = len(est)
        depths = _frame_depths(ds, n)
        result["depth_l1_cm"] = depth_l1(scene, gt[:n], depths, ds.intr, args.stride, delta=cfg.delta,
                                         n_g=cfg.n_g, n_d=cfg.n_d, near=cfg.near, far_deltas=cfg.far_deltas)
        truth = ds.scene()
        if truth is not None:
            mesh = cull_mesh(extract_mesh(scene, args.voxel, with_color=False), est, ds.intr, depths,
                             margin=2 * cfg.delta)
            pts = observed_surface_points(gt[:n], depths, ds.intr, 20_000, np.random.default_rng(0))
            metrics = chamfer_metrics(mesh, truth.sdf, pts)
            result["chamfer_accuracy_cm"] = metrics["accuracy_cm"]
            result["chamfer_completion_cm"] = metrics["completion_cm"]
    print(json.dumps({k: (v if math.isfinite(v) else None) for k, v in result.items()}, indent=2))
    return 0


def _run_config(run_dir) -> SlamConfig:
    path = Path(run_dir) / "config.txt"
    return RunConfig.build(path).slam if path.exists() else SlamConfig()


def cmd_mesh(args) -> int:
    ds = Dataset(args.data)
    scene = restore_scene(Path(args.run) / "checkpoint")
    mesh = extract_mesh(scene, args.voxel)
    if not args.no_cull:
        _, est = read_trajectory(Path(args.run) / "trajectory.txt")
        mesh = cull_mesh(mesh, est, ds.intr, _frame_depths(ds, len(est)), margin=2 * _run_config(args.run).delta)
    mesh.write_ply(args.out)
    print(f"wrote {len(mesh.vertices)} vertices, {len(mesh.faces)} faces to {args.out}")
    return 0


COMMANDS = {"generate": cmd_generate, "run": cmd_run, "eval": cmd_eval, "mesh": cmd_mesh}


def main(argv=None) -> int:
    setup_logging()
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
