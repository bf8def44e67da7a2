"""SE(3) poses as 6-vectors xi = [rho, phi].

Translation is carried as rho directly (the left Jacobian is omitted from the
translation term), so t = rho and a pose update is plain addition on xi.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass
from typing import TYPE_CHECKING, Sequence

import numpy as np
from scipy.spatial.transform import Rotation

from . import autodiff as ad
from .autodiff import Tensor
from .errors import GeometryError

if TYPE_CHECKING:
    from .lidar import PointCloud

logger = logging.getLogger(__name__)

SMALL_ANGLE = 1e-8

# so(3) generators for rotations about x, y, z.
_GENERATORS = np.array(
    [
        [[0.0, 0.0, 0.0], [0.0, 0.0, -1.0], [0.0, 1.0, 0.0]],
        [[0.0, 0.0, 1.0], [0.0, 0.0, 0.0], [-1.0, 0.0, 0.0]],
        [[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 0.0]],
    ]
)


def hat(phi: np.ndarray) -> np.ndarray:
    return np.tensordot(np.asarray(phi, dtype=np.float64), _GENERATORS, axes=1)


@dataclass(frozen=True)
class RigidTransform:
    R: np.ndarray
    t: np.ndarray

    def __post_init__(self) -> None:
        R = np.asarray(self.R, dtype=np.float64)
        t = np.asarray(self.t, dtype=np.float64).reshape(-1)
        if R.shape != (3, 3) or t.shape != (3,):
            raise GeometryError(f"RigidTransform needs R 3x3 and t 3-vector, got {R.shape} and {t.shape}")
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)

    @classmethod
    def identity(cls) -> RigidTransform:
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, M: np.ndarray) -> RigidTransform:
        M = np.asarray(M, dtype=np.float64)
        if M.shape not in ((4, 4), (3, 4)):
            raise GeometryError(f"expected a 3x4 or 4x4 matrix, got {M.shape}")
        return cls(M[:3, :3], M[:3, 3])

    def matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.R
        M[:3, 3] = self.t
        return M

    def inverse(self) -> RigidTransform:
        return RigidTransform(self.R.T, -self.R.T @ self.t)

    def __matmul__(self, other: RigidTransform) -> RigidTransform:
        return compose(self, other)

    def apply_points(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        return pts @ self.R.T + self.t

    def is_valid(self, tol: float = 1e-9) -> bool:
        return bool(np.allclose(self.R.T @ self.R, np.eye(3), atol=tol) and abs(np.linalg.det(self.R) - 1.0) < tol)


def exp_map_tensor(xi: Tensor) -> tuple[Tensor, Tensor]:
    """Differentiable (R, t) from a 6-vector tensor via Rodrigues' formula."""

    if xi.shape != (6,):
        raise GeometryError(f"pose vector must have shape (6,), got {xi.shape}")
    rho = xi[0:3]
    phi = xi[3:6]
    K = (phi.reshape(3, 1, 1) * Tensor(_GENERATORS)).sum(axis=0)
    KK = K @ K
    eye = Tensor(np.eye(3))
    theta2 = (phi * phi).sum()
    if np.sqrt(theta2.data) < SMALL_ANGLE:
        return eye + K + 0.5 * KK, rho
    theta = ad.sqrt(theta2)
    a = ad.sin(theta) / theta
    # (1 - cos t) / t^2 written as 2 sin^2(t/2) / t^2 to avoid cancellation.
    half = ad.sin(theta * 0.5) / (theta * 0.5)
    b = 0.5 * half * half
    return eye + a * K + b * KK, rho


def exp_map(xi: np.ndarray | Sequence[float]) -> RigidTransform:
    with ad.no_grad():
        R, t = exp_map_tensor(Tensor(np.asarray(xi, dtype=np.float64).reshape(6)))
    return RigidTransform(R.data.copy(), t.data.copy())


def log_map(T: RigidTransform) -> np.ndarray:
    phi = Rotation.from_matrix(T.R).as_rotvec()
    return np.concatenate([T.t, phi])


def wrap_rotvec(phi: np.ndarray) -> np.ndarray:
    """Same rotation with angle in [0, pi]."""

    phi = np.asarray(phi, dtype=np.float64)
    theta = float(np.linalg.norm(phi))
    if theta <= np.pi:
        return phi
    wrapped = np.mod(theta + np.pi, 2.0 * np.pi) - np.pi
    return phi / theta * wrapped


def invert(T: RigidTransform) -> RigidTransform:
    return T.inverse()


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """a after b."""

    return RigidTransform(a.R @ b.R, a.R @ b.t + a.t)


def apply(T: RigidTransform, cloud: PointCloud) -> PointCloud:
    return dataclasses.replace(cloud, points=T.apply_points(cloud.points))


def relative_pose(Ti: RigidTransform, Tj: RigidTransform) -> RigidTransform:
    """Pose of frame i expressed in frame j: Tj^-1 Ti."""

    return compose(Tj.inverse(), Ti)


def rotation_angle(R: np.ndarray) -> float:
    """Geodesic angle of R in radians.

    Equal to arccos((tr R - 1) / 2) clamped to [-1, 1]; evaluated with atan2 so
    angles near 0 and pi keep full precision.
    """

    R = np.asarray(R, dtype=np.float64)
    c = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    w = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    s = 0.5 * np.linalg.norm(w)
    return float(np.arctan2(s, c))


def transform_points(R: Tensor, t: Tensor, points: np.ndarray | Tensor) -> Tensor:
    """Differentiable x -> R x + t for an (N, 3) array of points."""

    return ad.as_tensor(points) @ R.T + t


def align_trajectory_known_scale(
    est: Sequence[RigidTransform], gt: Sequence[RigidTransform]
) -> RigidTransform:
    """Rigid A minimising sum ||A(est_k.t) - gt_k.t||^2 (Umeyama with unit scale)."""

    if len(est) != len(gt):
        raise GeometryError(f"trajectory length mismatch: {len(est)} vs {len(gt)}")
    if len(est) < 3:
        raise GeometryError(f"alignment needs at least 3 poses, got {len(est)}")
    p = np.stack([T.t for T in est])
    q = np.stack([T.t for T in gt])
    mu_p, mu_q = p.mean(axis=0), q.mean(axis=0)
    pc, qc = p - mu_p, q - mu_q
    sv = np.linalg.svd(pc, compute_uv=False)
    sv_gt = np.linalg.svd(qc, compute_uv=False)
    scale = max(sv[0], sv_gt[0], 1e-300)
    if sv[1] <= 1e-10 * scale or sv_gt[1] <= 1e-10 * scale:
        logger.warning("degenerate (collinear) trajectory; alignment skipped, identity returned")
        return RigidTransform.identity()
    cov = qc.T @ pc / len(p)
    U, _, Vt = np.linalg.svd(cov)
    D = np.eye(3)
    D[2, 2] = np.sign(np.linalg.det(U) * np.linalg.det(Vt)) or 1.0
    R = U @ D @ Vt
    return RigidTransform(R, mu_q - R @ mu_p)


class PoseParams:
    """Per-frame 6-vector pose parameters; frame 0 is the gauge and stays frozen."""

    def __init__(self, xis: np.ndarray, *, freeze_first: bool = True, trainable: bool = True) -> None:
        xis = np.asarray(xis, dtype=np.float64).reshape(-1, 6)
        if not np.all(np.isfinite(xis)):
            raise GeometryError("pose parameters must be finite")
        self.xi: list[Tensor] = []
        for k, x in enumerate(xis):
            x = np.concatenate([x[:3], wrap_rotvec(x[3:])])
            grad = trainable and not (freeze_first and k == 0)
            self.xi.append(Tensor(x, requires_grad=grad, name=f"pose.{k}"))

    @classmethod
    def from_transforms(cls, transforms: Sequence[RigidTransform], **kw: bool) -> PoseParams:
        return cls(np.stack([log_map(T) for T in transforms]), **kw)

    def __len__(self) -> int:
        return len(self.xi)

    def trainable(self) -> list[Tensor]:
        return [x for x in self.xi if x.requires_grad]

    def tensors(self, k: int) -> tuple[Tensor, Tensor]:
        return exp_map_tensor(self.xi[k])

    def transform(self, k: int) -> RigidTransform:
        return exp_map(self.xi[k].data)

    def transforms(self) -> list[RigidTransform]:
        return [self.transform(k) for k in range(len(self))]

    def as_array(self) -> np.ndarray:
        return np.stack([x.data for x in self.xi])

    def set_array(self, xis: np.ndarray) -> None:
        for x, value in zip(self.xi, np.asarray(xis, dtype=np.float64).reshape(-1, 6)):
            x.data = value.copy()
            x.grad = None
