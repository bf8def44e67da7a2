from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

# Allow running as a script: `python scripts/run_ablation.py`
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), "..")))

from nlf.logging_config import setup_logging
from nlf.metrics import write_metrics_csv
from nlf.settings import load_config, settings
from nlf.trainer import train

logger = logging.getLogger(__name__)

VARIANTS: dict[str, dict] = {
    "full": {},
    "gp_off": {"use_pose_graph": False},
    "se_off": {"use_spectral": False},
    "cf_off": {"use_cross_frame": False},
}


def run(*, config: Path | None, out: Path, seeds: list[int], iters: int | None) -> bool:
    results: dict[str, list] = {name: [] for name in VARIANTS}
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.csv").unlink(missing_ok=True)
    for seed in seeds:
        for name, switches in VARIANTS.items():
            overrides: dict = {"name": f"{name}-s{seed}", "seed": seed, "switches": switches}
            if iters:
                overrides["schedule"] = {"total_iters": iters}
            cfg = load_config(config, preset="desk", overrides=overrides)
            result = train(cfg, out / cfg.name)
            write_metrics_csv(out / "ablation.csv", result.report, label=cfg.name)
            results[name].append(result)
            logger.info("%s: ate %.4f, held-out depth rmse %.4f", cfg.name, result.final_ate, result.report.depth_rmse)

    def mean(name: str, attr: str) -> float:
        if attr == "final_ate":
            return float(np.mean([r.final_ate for r in results[name]]))
        return float(np.mean([getattr(r.report, attr) for r in results[name]]))

    for name in VARIANTS:
        print(f"{name:<8} ate={mean(name, 'final_ate'):.6f} depth_rmse={mean(name, 'depth_rmse'):.6f} cd={mean(name, 'cd'):.6f}")

    checks = {
        "gp_off worsens ATE": all(
            off.final_ate > full.final_ate for off, full in zip(results["gp_off"], results["full"])
        ),
        "se_off worsens held-out RMSE": all(
            off.report.depth_rmse > full.report.depth_rmse for off, full in zip(results["se_off"], results["full"])
        ),
    }
    for name, ok in checks.items():
        print(f"{'PASS' if ok else 'FAIL'}  {name}")
    return all(checks.values())


def main() -> None:
    setup_logging(settings.log_level)

    p = argparse.ArgumentParser(description="Component ablations on the desk scene")
    p.add_argument("--config", type=Path, default=None, help="Optional TOML on top of the desk preset")
    p.add_argument("--out", type=Path, default=Path(settings.run_root) / "ablation")
    p.add_argument("--seeds", default="0,1,2", help="Comma-separated experiment seeds")
    p.add_argument("--iters", type=int, default=None, help="Override schedule.total_iters")
    args = p.parse_args()

    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    ok = run(config=args.config, out=args.out, seeds=seeds, iters=args.iters)
    sys.exit(0 if ok else 1)


if __name__ == "__main__":
    main()
