import sys
import tempfile
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

ROOT = Path(__file__).resolve().parents[1]
if str(ROOT) not in sys.path:
    sys.path.insert(0, str(ROOT))

from nlf.errors import GeometryError, ShapeError  # noqa: E402
from nlf.lidar import PointCloud  # noqa: E402
from nlf.metrics import PSNR_CAP, ate, chamfer_distance, fscore, image_metrics, rpe, write_metrics_csv  # noqa: E402
from nlf.se3 import RigidTransform, compose  # noqa: E402
from nlf.types import MetricReport  # noqa: E402


def _curve(n: int = 10) -> list[RigidTransform]:
    return [
        RigidTransform(Rotation.from_euler("z", 6.0 * k, degrees=True).as_matrix(), np.array([1.5 * k, 0.2 * k * k, 0.05 * k]))
        for k in range(n)
    ]


def _global() -> RigidTransform:
    return RigidTransform(Rotation.from_rotvec([0.4, -0.9, 1.3]).as_matrix(), np.array([3.0, -7.0, 2.5]))


def test_fscore_cases():
    rng = np.random.default_rng(0)
    pts = rng.normal(size=(50, 3))
    assert fscore(pts, pts) == 1.0
    assert fscore(np.zeros((1, 3)), np.array([[1.0, 0.0, 0.0]])) == 0.0
    gt = np.array([[0.0, 0.0, 0.0], [10.0, 0.0, 0.0]])
    pred = np.array([[0.0, 0.0, 0.0], [10.1, 0.0, 0.0]])
    assert abs(fscore(pred, gt) - 0.5) < 1e-12
    other = pts + rng.normal(scale=0.05, size=pts.shape)
    assert fscore(pts, other) == fscore(other, pts)
    try:
        fscore(PointCloud.empty(), pts)
    except GeometryError:
        pass
    else:
        raise AssertionError("empty cloud accepted")


def test_cloud_metrics_symmetric_and_rigid_invariant():
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=(40, 3)), rng.normal(size=(30, 3))
    assert chamfer_distance(a, a) == 0.0
    assert abs(chamfer_distance(a, b) - chamfer_distance(b, a)) < 1e-12
    T = _global()
    moved = chamfer_distance(T.apply_points(a), T.apply_points(b))
    assert abs(moved - chamfer_distance(a, b)) < 1e-9

    near = a + rng.normal(scale=0.03, size=a.shape)
    score = fscore(near, a)
    assert 0.0 < score < 1.0
    assert abs(fscore(T.apply_points(near), T.apply_points(a)) - score) < 1e-12


def test_image_metrics_identity():
    gt = np.random.default_rng(2).uniform(1.0, 20.0, size=(16, 32))
    scores = image_metrics(gt, gt)
    assert scores.rmse == 0.0 and scores.medae == 0.0
    assert scores.psnr == PSNR_CAP
    assert abs(scores.ssim - 1.0) < 1e-9


def test_image_metrics_offset_and_toy():
    gt = np.random.default_rng(3).uniform(1.0, 20.0, size=(8, 8))
    scores = image_metrics(gt + 1.0, gt)
    assert abs(scores.rmse - 1.0) < 1e-12 and abs(scores.medae - 1.0) < 1e-12
    assert abs(scores.psnr - 20.0 * np.log10(gt.max() / scores.rmse)) < 1e-9

    toy = np.array([[1.0, 2.0], [3.0, 4.0]])
    pred = toy + np.array([[0.0, 1.0], [2.0, 3.0]])
    scores = image_metrics(pred, toy)
    assert abs(scores.rmse - np.sqrt(14.0 / 4.0)) < 1e-12
    assert scores.medae == 1.5
    assert image_metrics(pred, toy, median_mode="lower").medae == 1.0


def test_image_metrics_mask_and_errors():
    gt = np.array([[1.0, 2.0], [3.0, 4.0]])
    pred = gt.copy()
    pred[0, 0] = 100.0
    valid = np.array([[False, True], [True, True]])
    assert image_metrics(pred, gt, valid).rmse == 0.0
    try:
        image_metrics(np.zeros((2, 3)), gt)
    except ShapeError:
        pass
    else:
        raise AssertionError("shape mismatch accepted")
    try:
        image_metrics(pred, gt, np.zeros((2, 2), dtype=bool))
    except GeometryError:
        pass
    else:
        raise AssertionError("all-dropped ground truth accepted")


def test_ate_zero_cases():
    gt = _curve()
    assert ate(gt, gt) < 1e-9
    shifted = [RigidTransform(P.R, P.t + np.array([1.0, 0.0, 0.0])) for P in gt]
    assert ate(shifted, gt) < 1e-9


def test_ate_invariant_to_global_transform():
    rng = np.random.default_rng(4)
    gt = _curve()
    est = [RigidTransform(P.R, P.t + rng.normal(scale=0.05, size=3)) for P in gt]
    moved = [compose(_global(), P) for P in est]
    assert abs(ate(moved, gt) - ate(est, gt)) < 1e-9


def test_ate_one_pose_off_on_straight_line():
    gt = [RigidTransform(np.eye(3), np.array([float(k), 0.0, 0.0])) for k in range(10)]
    est = list(gt)
    est[6] = RigidTransform(np.eye(3), np.array([6.0, 1.0, 0.0]))
    # A collinear ground truth leaves the alignment at identity.
    assert abs(ate(est, gt) - np.sqrt(1.0 / 10.0)) < 1e-12
    try:
        ate(est[:5], gt)
    except GeometryError:
        pass
    else:
        raise AssertionError("length mismatch accepted")


def _chain(start: RigidTransform, steps: list[RigidTransform]) -> list[RigidTransform]:
    out = [start]
    for step in steps:
        out.append(compose(out[-1], step))
    return out


def test_rpe_single_corrupted_rotation():
    gt = _curve()
    steps = [compose(gt[k].inverse(), gt[k + 1]) for k in range(9)]
    twist = RigidTransform(Rotation.from_euler("x", 5.0, degrees=True).as_matrix(), np.zeros(3))
    steps[4] = compose(steps[4], twist)
    rpe_r, rpe_t = rpe(_chain(gt[0], steps), gt)
    assert abs(rpe_r - 5.0 / np.sqrt(9.0)) < 1e-9
    assert rpe_t < 1e-9


def test_rpe_zero_cases():
    gt = _curve()
    assert max(rpe(gt, gt)) < 1e-9
    rpe_r, rpe_t = rpe([compose(_global(), P) for P in gt], gt)
    assert rpe_r < 1e-9 and rpe_t < 1e-9
    try:
        rpe(gt[:1], gt[:1])
    except GeometryError:
        pass
    else:
        raise AssertionError("single pose accepted")


def test_write_metrics_csv():
    report = MetricReport(cd=0.25, fscore=0.5, ate_m=1.0)
    with tempfile.TemporaryDirectory() as tmp:
        path = write_metrics_csv(Path(tmp) / "metrics.csv", report)
        write_metrics_csv(path, report)
        lines = path.read_text().splitlines()
    assert lines[0] == MetricReport.csv_header()
    assert len(lines) == 3 and lines[1] == lines[2]
    assert lines[1].split(",")[0] == "0.25"


def _run() -> None:
    for name, fn in sorted(globals().items()):
        if name.startswith("test_") and callable(fn):
            fn()
            print(f"ok  {name}")


if __name__ == "__main__":
    _run()
