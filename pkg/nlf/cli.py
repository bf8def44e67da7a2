from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

from .errors import ConfigError, GeometryError, NumericalAbort, ScanFormatError
from .logging_config import run_log, setup_logging
from .lidar import write_trajectory
from .scene import save_scene
from .settings import load_config, resolve_seed, settings
from .trainer import diagnose, eval_run, prepare_data, train

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3


def _config(args: argparse.Namespace):
    overrides: dict = {}
    if getattr(args, "name", None):
        overrides["name"] = args.name
    if getattr(args, "data", None):
        overrides["data_dir"] = str(args.data)
    if getattr(args, "iters", None):
        overrides.setdefault("schedule", {})["total_iters"] = int(args.iters)
    for flag in ("no_spectral", "no_pose_graph", "no_cross_frame"):
        if getattr(args, flag, False):
            overrides.setdefault("switches", {})["use_" + flag[3:]] = False
    return load_config(args.config, preset=args.preset, overrides=overrides or None)


def cmd_gen(args: argparse.Namespace) -> int:
    cfg = _config(args)
    seed = resolve_seed(cfg.seed)
    data = prepare_data(cfg, seed)
    out = save_scene(args.out, data.scans, data.gt_poses)
    write_trajectory(out / "poses_init.txt", data.init_poses)
    (out / "config.json").write_text(cfg.model_dump_json(indent=2))
    print(f"wrote {len(data.scans)} scans to {out}")
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    cfg = _config(args)
    run_dir = Path(args.run_dir) if args.run_dir else Path(settings.run_root) / cfg.name
    with run_log(run_dir / "train.log"):
        result = train(cfg, run_dir)
    print(result.report.table())
    print(f"checkpoint={result.checkpoint}")
    print(f"ate_initial={result.initial_ate:.6f} ate_final={result.final_ate:.6f}")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    frames = [int(f) for f in args.frames.split(",")] if args.frames else None
    report = eval_run(args.run_dir, frames=frames)
    print(report.table())
    return EXIT_OK


def cmd_diag(args: argparse.Namespace) -> int:
    summary = diagnose(args.run_dir, args.out, pairs=bool(args.pairs))
    print(json.dumps(summary, indent=2))
    return EXIT_OK


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, default=None, help="TOML experiment config")
    p.add_argument("--preset", default=None, help="Named preset: desk (default) or full")
    p.add_argument("--name", default=None, help="Run name (also the run directory under NLF_RUN_ROOT)")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nlf", description="Pose-free neural LiDAR fields")
    p.add_argument("--log-level", default=None, help="Overrides NLF_LOG_LEVEL")
    sub = p.add_subparsers(dest="cmd", required=True)

    p_gen = sub.add_parser("gen", help="Generate a synthetic scene: scan files plus ground-truth trajectory")
    _add_config_args(p_gen)
    p_gen.add_argument("--out", type=Path, required=True, help="Output directory")
    p_gen.set_defaults(func=cmd_gen)

    p_train = sub.add_parser("train", help="Train a field and its poses")
    _add_config_args(p_train)
    p_train.add_argument("--run-dir", type=Path, default=None, help="Run directory (default NLF_RUN_ROOT/<name>)")
    p_train.add_argument("--data", type=Path, default=None, help="Scene directory written by `gen`")
    p_train.add_argument("--iters", type=int, default=None, help="Override schedule.total_iters")
    p_train.add_argument("--no-spectral", action="store_true", help="Disable the spectral embedding")
    p_train.add_argument("--no-pose-graph", action="store_true", help="Optimise poses by the range loss only")
    p_train.add_argument("--no-cross-frame", action="store_true", help="Disable the adversarial consistency loss")
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="Evaluate the last checkpoint of a run")
    p_eval.add_argument("run_dir", type=Path)
    p_eval.add_argument("--frames", default=None, help="Comma-separated frame indices (default: held-out frames)")
    p_eval.set_defaults(func=cmd_eval)

    p_diag = sub.add_parser("diag", help="Dump pose graph, eigenfunction images and depth pairs")
    p_diag.add_argument("run_dir", type=Path)
    p_diag.add_argument("--out", type=Path, default=None, help="Output directory (default <run_dir>/diag)")
    p_diag.add_argument("--pairs", action="store_true", help="Also write real/fake depth pairs")
    p_diag.set_defaults(func=cmd_diag)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(args.log_level or settings.log_level)
    try:
        return args.func(args)
    except (ConfigError, GeometryError, ScanFormatError) as exc:
        logger.error("%s", exc)
        return EXIT_CONFIG
    except NumericalAbort as exc:
        logger.error("%s (last good checkpoint: %s)", exc, exc.checkpoint)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
