import sys
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

ROOT = Path(__file__).resolve().parents[1]
if str(ROOT) not in sys.path:
    sys.path.insert(0, str(ROOT))

from nlf.autodiff import Tape, Tensor, backward, gradcheck  # noqa: E402
from nlf.errors import GeometryError  # noqa: E402
from nlf.lidar import PointCloud  # noqa: E402
from nlf.se3 import (  # noqa: E402
    PoseParams,
    RigidTransform,
    align_trajectory_known_scale,
    apply,
    compose,
    exp_map,
    exp_map_tensor,
    hat,
    log_map,
    relative_pose,
    rotation_angle,
    transform_points,
)

RZ90 = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])


def _random_transform(rng: np.random.Generator) -> RigidTransform:
    return RigidTransform(Rotation.from_rotvec(rng.normal(size=3)).as_matrix(), rng.normal(size=3) * 3.0)


def _series_exp(K: np.ndarray, terms: int = 20) -> np.ndarray:
    out = np.eye(3)
    term = np.eye(3)
    for n in range(1, terms + 1):
        term = term @ K / n
        out = out + term
    return out


def test_exp_map_identity_and_z_rotation():
    T = exp_map(np.zeros(6))
    assert np.allclose(T.R, np.eye(3)) and np.allclose(T.t, 0.0)
    T = exp_map([1.0, 0.0, 0.0, 0.0, 0.0, np.pi / 2])
    assert np.allclose(T.R, RZ90, atol=1e-12)
    assert np.allclose(T.t, [1.0, 0.0, 0.0])


def test_exp_map_matches_series():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        xi = np.concatenate([rng.normal(size=3), rng.normal(size=3) * 0.5])
        R = exp_map(xi).R
        assert np.abs(R - _series_exp(hat(xi[3:]))).max() < 1e-10


def test_exp_map_rotation_is_valid():
    rng = np.random.default_rng(1)
    for _ in range(200):
        T = exp_map(rng.normal(size=6) * 2.0)
        assert T.is_valid()


def test_exp_map_gradient():
    rng = np.random.default_rng(2)
    pts = rng.normal(size=(6, 3))
    w = rng.normal(size=(6, 3))
    for scale in (1e-3, 0.5, 2.0):
        xi = Tensor(rng.normal(size=6) * scale, requires_grad=True)

        def loss():
            R, t = exp_map_tensor(xi)
            return (transform_points(R, t, pts) * w).sum()

        assert gradcheck(loss, [xi]) < 1e-4


def test_log_map_round_trip():
    rng = np.random.default_rng(3)
    for _ in range(50):
        T = _random_transform(rng)
        back = exp_map(log_map(T))
        assert np.allclose(back.R, T.R, atol=1e-10) and np.allclose(back.t, T.t)


def test_apply():
    cloud = PointCloud(np.array([[1.0, 0.0, 0.0], [0.5, -2.0, 3.0]]))
    assert np.allclose(apply(RigidTransform.identity(), cloud).points, cloud.points)
    rz = RigidTransform(RZ90, np.zeros(3))
    assert np.allclose(apply(rz, cloud).points[0], [0.0, 1.0, 0.0])
    T = _random_transform(np.random.default_rng(4))
    assert np.abs(apply(T, apply(T.inverse(), cloud)).points - cloud.points).max() < 1e-9


def test_relative_pose():
    rng = np.random.default_rng(5)
    Ti, Tj = _random_transform(rng), _random_transform(rng)
    assert relative_pose(Ti, Ti).is_valid()
    assert np.allclose(relative_pose(Ti, Ti).matrix(), np.eye(4), atol=1e-12)
    assert np.allclose(relative_pose(Ti, RigidTransform.identity()).matrix(), Ti.matrix())
    x = rng.normal(size=(10, 3))
    lhs = relative_pose(Ti, Tj).apply_points(x)
    rhs = Tj.inverse().apply_points(Ti.apply_points(x))
    assert np.allclose(lhs, rhs, atol=1e-12)


def _trajectory(n: int = 10) -> list[RigidTransform]:
    out = []
    for k in range(n):
        R = Rotation.from_euler("z", 8.0 * k, degrees=True).as_matrix()
        out.append(RigidTransform(R, np.array([2.0 * k, 0.3 * k * k, 0.1 * np.sin(k)])))
    return out


def test_alignment_identity_and_known_transform():
    gt = _trajectory()
    A = align_trajectory_known_scale(gt, gt)
    assert np.allclose(A.matrix(), np.eye(4), atol=1e-9)
    T = _random_transform(np.random.default_rng(6))
    est = [compose(T, P) for P in gt]
    A = align_trajectory_known_scale(est, gt)
    assert np.allclose(A.matrix(), T.inverse().matrix(), atol=1e-8)


def test_alignment_reduces_error_under_noise():
    rng = np.random.default_rng(7)
    gt = _trajectory()
    est = [RigidTransform(P.R, P.t + rng.normal(scale=0.01, size=3)) for P in gt]
    A = align_trajectory_known_scale(est, gt)
    before = np.mean([np.sum((P.t - Q.t) ** 2) for P, Q in zip(est, gt)])
    after = np.mean([np.sum((compose(A, P).t - Q.t) ** 2) for P, Q in zip(est, gt)])
    assert after < before


def test_alignment_rejects_short_or_mismatched():
    gt = _trajectory(3)
    for est in (gt[:2], gt[:1]):
        try:
            align_trajectory_known_scale(est, est)
        except GeometryError:
            pass
        else:
            raise AssertionError("short trajectory accepted")
    try:
        align_trajectory_known_scale(gt, gt[:2])
    except GeometryError:
        pass
    else:
        raise AssertionError("length mismatch accepted")


def test_rotation_angle():
    assert rotation_angle(np.eye(3)) == 0.0
    assert abs(rotation_angle(RZ90) - np.pi / 2) < 1e-12
    rng = np.random.default_rng(8)
    for _ in range(1000):
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        theta = rng.uniform(1e-3, np.pi - 1e-3)
        R = Rotation.from_rotvec(axis * theta).as_matrix()
        assert abs(rotation_angle(R) - theta) < 1e-10


def test_pose_params_gauge():
    poses = PoseParams(np.random.default_rng(9).normal(size=(3, 6)))
    assert not poses.xi[0].requires_grad
    assert len(poses.trainable()) == 2
    frozen = PoseParams(np.zeros((3, 6)), trainable=False)
    assert frozen.trainable() == []
    T = _trajectory(3)
    params = PoseParams.from_transforms(T)
    for k in range(3):
        assert np.allclose(params.transform(k).matrix(), T[k].matrix(), atol=1e-10)


def test_translation_increments_add_exactly():
    start = np.array([[0.0] * 6, [1.25, -0.5, 3.0, 0.1, -0.2, 0.3]])
    step = np.array([0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.5, 0.25, -0.125, 0.0, 0.0, 0.0]).reshape(2, 6)

    full = PoseParams(start)
    full.set_array(full.as_array() + step)
    halves = PoseParams(start)
    halves.set_array(halves.as_array() + step / 2)
    halves.set_array(halves.as_array() + step / 2)
    R_full, t_full = full.tensors(1)
    R_half, t_half = halves.tensors(1)
    assert np.array_equal(t_full.data, t_half.data)
    assert np.array_equal(t_full.data, start[1, :3] + step[1, :3])
    assert np.array_equal(R_full.data, R_half.data)

    # Gradient steps on a loss linear in the translation.
    weights = np.array([0.5, -1.0, 2.0])

    def descend(lr: float, steps: int) -> np.ndarray:
        poses = PoseParams(start)
        (xi,) = poses.trainable()
        for _ in range(steps):
            with Tape():
                _, t = poses.tensors(1)
                backward((t * weights).sum())
            xi.data = xi.data - lr * xi.grad
            xi.grad = None
        return poses.tensors(1)[1].data

    assert np.array_equal(descend(0.25, 1), descend(0.125, 2))
    assert np.array_equal(descend(0.25, 1), start[1, :3] - 0.25 * weights)


def _run() -> None:
    for name, fn in sorted(globals().items()):
        if name.startswith("test_") and callable(fn):
            fn()
            print(f"ok  {name}")


if __name__ == "__main__":
    _run()
