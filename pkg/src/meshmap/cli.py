"""Command-line interface: run the pipeline, evaluate meshes/trajectories,
and generate synthetic scenes.

Exit codes: 0 success, 1 usage error, 2 data error, 3 too many scan failures.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np
import yaml

from . import io as mio
from .config import ConfigError, PipelineConfig
from .evaluation import eval_ape, eval_mesh
from .pipeline import PipelineError, run_pipeline
from .synthetic import synth_scene

CONFIG_ENV = "MESHMAP_CONFIG"

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_FAILURES = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _load_config(args) -> PipelineConfig:
    path = args.config or os.environ.get(CONFIG_ENV)
    cfg = PipelineConfig.from_yaml(path) if path else PipelineConfig()
    if args.set:
        cfg = cfg.with_overrides(args.set)
    return cfg


def build_parser() -> _Parser:
    parser = _Parser(prog="meshmap",
                     description="Mesh-based LiDAR mapping pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run the mapping pipeline")
    run.add_argument("--config", help=f"YAML config (default ${CONFIG_ENV})")
    run.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                     help="override a config key")
    run.add_argument("--json", action="store_true",
                     help="print the report as JSON")

    evm = sub.add_parser("eval-mesh", help="precision/recall/F1 of a mesh")
    evm.add_argument("candidate", help="candidate mesh (.ply)")
    evm.add_argument("ground_truth", help="ground-truth mesh (.ply)")
    evm.add_argument("--delta", type=float, default=0.1,
                     help="match distance in meters")
    evm.add_argument("--density", type=float, default=100.0,
                     help="surface sampling density, points per square meter")
    evm.add_argument("--seed", type=int, default=0)

    eva = sub.add_parser("eval-ape", help="absolute pose error of a trajectory")
    eva.add_argument("estimated")
    eva.add_argument("ground_truth")
    eva.add_argument("--format", default="tum", choices=("tum", "kitti_3x4"))
    eva.add_argument("--gt-format", default=None, choices=("tum", "kitti_3x4"))
    eva.add_argument("--max-dt", type=float, default=0.05)

    syn = sub.add_parser("synth", help="generate a synthetic scene")
    syn.add_argument("scene", help="scene script (.yaml)")
    syn.add_argument("--out", required=True, help="output directory")
    syn.add_argument("--seed", type=int, default=0)
    return parser


def _cmd_run(args) -> int:
    cfg = _load_config(args)
    mesh, _traj, report = run_pipeline(cfg)
    print(report.to_json() if args.json else report.to_text(), end="")
    print(f"mesh_vertices: {mesh.n_vertices}")
    print(f"mesh_faces: {mesh.n_faces}")
    if report.n_scans and report.n_failures / report.n_scans > 0.10:
        return EXIT_FAILURES
    return EXIT_OK


def _cmd_eval_mesh(args) -> int:
    cand = mio.sample_mesh_surface(mio.read_mesh_ply(args.candidate),
                                   args.density, args.seed)
    gt = mio.sample_mesh_surface(mio.read_mesh_ply(args.ground_truth),
                                 args.density, args.seed + 1)
    precision, recall, f1 = eval_mesh(cand, gt, args.delta)
    print(f"precision: {precision:.2f}")
    print(f"recall: {recall:.2f}")
    print(f"f1: {f1:.2f}")
    return EXIT_OK


def _cmd_eval_ape(args) -> int:
    est = mio.read_poses(args.estimated, args.format)
    gt = mio.read_poses(args.ground_truth, args.gt_format or args.format)
    mean, rmse = eval_ape(est, gt, args.max_dt)
    print(f"ape_mean: {mean:.4f}")
    print(f"ape_rmse: {rmse:.4f}")
    return EXIT_OK


def _cmd_synth(args) -> int:
    script = yaml.safe_load(Path(args.scene).read_text())
    scene = synth_scene(script, args.seed)
    out = Path(args.out)
    (out / "scans").mkdir(parents=True, exist_ok=True)
    (out / "labels").mkdir(parents=True, exist_ok=True)
    for k, (scan, labels) in enumerate(zip(scene.scans, scene.labels)):
        mio.write_scan_bin(scan, out / "scans" / f"{k:06d}.bin")
        np.save(out / "labels" / f"{k:06d}.npy", labels)
    mio.write_trajectory(scene.trajectory, out / "poses_gt.txt", "tum")
    mio.write_mesh_ply(scene.gt_mesh, out / "gt_mesh.ply", binary=True)
    print(f"wrote {len(scene.scans)} scans to {out}")
    return EXIT_OK


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    handlers = {"run": _cmd_run, "eval-mesh": _cmd_eval_mesh,
                "eval-ape": _cmd_eval_ape, "synth": _cmd_synth}
    try:
        return handlers[args.command](args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (PipelineError, mio.FormatError, mio.EmptyScanError,
            FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
