from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Literal, Sequence

import numpy as np
from scipy.ndimage import gaussian_filter
from scipy.spatial import cKDTree

from .errors import GeometryError, ShapeError
from .lidar import PointCloud
from .se3 import RigidTransform, align_trajectory_known_scale, compose, rotation_angle
from .types import MetricReport

logger = logging.getLogger(__name__)

PSNR_CAP = 99.0
SSIM_SIGMA = 1.5
# gaussian_filter radius = int(truncate * sigma + 0.5) = 5 -> 11x11 window.
SSIM_TRUNCATE = 3.5


def _points(c: PointCloud | np.ndarray) -> np.ndarray:
    pts = np.asarray(getattr(c, "points", c), dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        raise GeometryError("metric over an empty point cloud")
    return pts


def _nn_dist(query: np.ndarray, ref: np.ndarray) -> np.ndarray:
    d, _ = cKDTree(ref).query(query)
    return np.asarray(d, dtype=np.float64)


def chamfer_distance(pred: PointCloud | np.ndarray, gt: PointCloud | np.ndarray) -> float:
    a, b = _points(pred), _points(gt)
    return float(np.mean(_nn_dist(a, b) ** 2) + np.mean(_nn_dist(b, a) ** 2))


def fscore(pred: PointCloud | np.ndarray, gt: PointCloud | np.ndarray, thresh: float = 0.05) -> float:
    a, b = _points(pred), _points(gt)
    precision = float(np.mean(_nn_dist(a, b) < thresh))
    recall = float(np.mean(_nn_dist(b, a) < thresh))
    if precision + recall == 0.0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


@dataclass(frozen=True)
class ImageScores:
    rmse: float
    medae: float
    psnr: float
    ssim: float


def ssim(pred: np.ndarray, gt: np.ndarray, data_range: float) -> float:
    """Mean SSIM with an 11x11 Gaussian window (sigma 1.5), C1 = (0.01 L)^2, C2 = (0.03 L)^2."""

    x = np.asarray(pred, dtype=np.float64)
    y = np.asarray(gt, dtype=np.float64)
    L = data_range if data_range > 0 else 1.0
    c1, c2 = (0.01 * L) ** 2, (0.03 * L) ** 2

    def blur(v: np.ndarray) -> np.ndarray:
        return gaussian_filter(v, sigma=SSIM_SIGMA, truncate=SSIM_TRUNCATE, mode="reflect")

    mx, my = blur(x), blur(y)
    vx = blur(x * x) - mx * mx
    vy = blur(y * y) - my * my
    cxy = blur(x * y) - mx * my
    ssim_map = ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
    return float(np.clip(ssim_map.mean(), -1.0, 1.0))


def image_metrics(
    pred: np.ndarray,
    gt: np.ndarray,
    valid: np.ndarray | None = None,
    *,
    median_mode: Literal["midpoint", "lower"] = "midpoint",
) -> ImageScores:
    """RMSE / MedAE over valid gt pixels, PSNR against the gt peak, SSIM over the whole image."""

    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ShapeError("image_metrics", pred.shape, gt.shape)
    mask = np.ones(gt.shape, dtype=bool) if valid is None else np.asarray(valid, dtype=bool)
    if not mask.any():
        raise GeometryError("image metrics need at least one valid ground-truth pixel")
    err = np.abs(pred[mask] - gt[mask])
    rmse = float(np.sqrt(np.mean(err * err)))
    if median_mode == "lower":
        medae = float(np.sort(err)[(len(err) - 1) // 2])
    else:
        medae = float(np.median(err))
    peak = float(gt[mask].max())
    if rmse == 0.0 or peak <= 0.0:
        psnr = PSNR_CAP
    else:
        psnr = float(min(20.0 * np.log10(peak / rmse), PSNR_CAP))
    return ImageScores(rmse, medae, psnr, ssim(pred, gt, peak))


def _check_lengths(est: Sequence[RigidTransform], gt: Sequence[RigidTransform]) -> None:
    if len(est) != len(gt):
        raise GeometryError(f"trajectory length mismatch: {len(est)} vs {len(gt)}")


def ate(est: Sequence[RigidTransform], gt: Sequence[RigidTransform]) -> float:
    """Translation RMSE after known-scale alignment of ``est`` onto ``gt``."""

    _check_lengths(est, gt)
    A = align_trajectory_known_scale(est, gt)
    diff = np.stack([compose(A, P).t - Q.t for P, Q in zip(est, gt)])
    return float(np.sqrt(np.mean(np.sum(diff * diff, axis=1))))


def rpe(est: Sequence[RigidTransform], gt: Sequence[RigidTransform]) -> tuple[float, float]:
    """(rotation RMSE in degrees, translation RMSE in cm) of consecutive relative motions."""

    _check_lengths(est, gt)
    if len(est) < 2:
        raise GeometryError("RPE needs at least 2 poses")
    angles, shifts = [], []
    for k in range(len(est) - 1):
        gt_step = compose(gt[k].inverse(), gt[k + 1])
        est_step = compose(est[k].inverse(), est[k + 1])
        E = compose(gt_step.inverse(), est_step)
        angles.append(rotation_angle(E.R))
        shifts.append(float(np.linalg.norm(E.t)))
    rpe_r = float(np.degrees(np.sqrt(np.mean(np.square(angles)))))
    rpe_t = float(np.sqrt(np.mean(np.square(shifts))) * 100.0)
    return rpe_r, rpe_t


def write_metrics_csv(path: str | Path, report: MetricReport, *, label: str | None = None) -> Path:
    """Append one row (writing the header first for a new file)."""

    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    header = ("label," if label is not None else "") + MetricReport.csv_header()
    row = (f"{label}," if label is not None else "") + report.csv_row()
    fresh = not p.exists() or p.stat().st_size == 0
    with p.open("a") as fh:
        if fresh:
            fh.write(header + "\n")
        fh.write(row + "\n")
    return p
