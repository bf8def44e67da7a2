from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

# Allow running as a script: `python scripts/run_desk.py`
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), "..")))

from nlf.logging_config import setup_logging
from nlf.settings import load_config, resolve_seed, settings
from nlf.trainer import prepare_data, train

logger = logging.getLogger(__name__)

WINDOW = 20


def scene_diameter(data) -> float:
    pts = np.concatenate([T.apply_points(c.points) for T, c in zip(data.gt_poses, data.scans)])
    return float(np.linalg.norm(pts.max(axis=0) - pts.min(axis=0)))


def decreasing_windows(losses: list[float], window: int = WINDOW) -> float:
    """Share of consecutive ``window``-step chunks whose last loss is no higher than their first."""

    chunks = [losses[k : k + window] for k in range(0, len(losses) - window + 1, window)]
    if not chunks:
        return 1.0
    return float(np.mean([c[-1] <= c[0] for c in chunks]))


def run(*, config: Path | None, run_dir: Path, iters: int | None) -> bool:
    overrides = {"name": "desk-acceptance"}
    if iters:
        overrides["schedule"] = {"total_iters": iters}
    cfg = load_config(config, preset="desk", overrides=overrides)
    data = prepare_data(cfg, resolve_seed(cfg.seed))
    diameter = scene_diameter(data)
    result = train(cfg, run_dir, data=data)

    checks = {
        "ate_ratio<=0.2": result.final_ate <= 0.2 * result.initial_ate,
        "heldout_rmse<=5%_diameter": result.report.depth_rmse <= 0.05 * diameter,
        "graph_windows>=90%": decreasing_windows(result.graph_losses) >= 0.9,
    }
    print(result.report.table())
    print(f"ate_initial={result.initial_ate:.6f} ate_final={result.final_ate:.6f} scene_diameter={diameter:.3f}")
    for name, ok in checks.items():
        print(f"{'PASS' if ok else 'FAIL'}  {name}")
    return all(checks.values())


def main() -> None:
    setup_logging(settings.log_level)

    p = argparse.ArgumentParser(description="End-to-end desk run with acceptance checks")
    p.add_argument("--config", type=Path, default=None, help="Optional TOML on top of the desk preset")
    p.add_argument("--run-dir", type=Path, default=Path(settings.run_root) / "desk-acceptance")
    p.add_argument("--iters", type=int, default=None, help="Override schedule.total_iters")
    args = p.parse_args()

    ok = run(config=args.config, run_dir=args.run_dir, iters=args.iters)
    sys.exit(0 if ok else 1)


if __name__ == "__main__":
    main()
