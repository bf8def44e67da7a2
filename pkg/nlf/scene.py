"""Analytic LiDAR scenes: closed-form ray casting against simple primitives."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import GeometryError
from .lidar import (
    PointCloud,
    RangeImage,
    direction_grid,
    read_scan_bin,
    read_trajectory,
    write_scan_bin,
    write_trajectory,
)
from .se3 import RigidTransform
from .types import NoiseSpec, SceneConfig, SensorModel

logger = logging.getLogger(__name__)

EPS = 1e-9


class Primitive(Protocol):
    intensity: float

    def intersect(self, origins: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        """Hit distance per ray, inf where the ray misses."""

    def contains(self, p: np.ndarray) -> bool: ...


def _first_positive(*candidates: np.ndarray) -> np.ndarray:
    t = np.stack(candidates)
    t = np.where(t > EPS, t, np.inf)
    return t.min(axis=0)


@dataclass(frozen=True)
class Plane:
    normal: tuple[float, float, float]
    offset: float
    intensity: float = 0.3

    def intersect(self, origins: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        n = np.asarray(self.normal, dtype=np.float64)
        denom = dirs @ n
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (self.offset - origins @ n) / denom
        return np.where((np.abs(denom) > EPS) & (t > EPS), t, np.inf)

    def contains(self, p: np.ndarray) -> bool:
        # The half-space behind the normal is solid.
        return float(np.dot(self.normal, p)) < self.offset


@dataclass(frozen=True)
class Box:
    lo: tuple[float, float, float]
    hi: tuple[float, float, float]
    intensity: float = 0.6

    def intersect(self, origins: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        lo, hi = np.asarray(self.lo), np.asarray(self.hi)
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / dirs
            t0 = (lo - origins) * inv
            t1 = (hi - origins) * inv
        t0 = np.nan_to_num(t0, nan=-np.inf)
        t1 = np.nan_to_num(t1, nan=np.inf)
        near = np.minimum(t0, t1).max(axis=1)
        far = np.maximum(t0, t1).min(axis=1)
        hit = (near <= far) & (far > EPS)
        t = np.where(near > EPS, near, far)
        return np.where(hit, t, np.inf)

    def contains(self, p: np.ndarray) -> bool:
        return bool(np.all(p > np.asarray(self.lo)) and np.all(p < np.asarray(self.hi)))


@dataclass(frozen=True)
class Cylinder:
    """Vertical capped cylinder."""

    center: tuple[float, float]
    radius: float
    z_min: float
    z_max: float
    intensity: float = 0.8

    def intersect(self, origins: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        cx, cy = self.center
        ox, oy = origins[:, 0] - cx, origins[:, 1] - cy
        dx, dy = dirs[:, 0], dirs[:, 1]
        a = dx * dx + dy * dy
        b = 2.0 * (ox * dx + oy * dy)
        c = ox * ox + oy * oy - self.radius**2
        disc = b * b - 4.0 * a * c
        ok = (a > EPS) & (disc >= 0.0)
        root = np.sqrt(np.where(ok, disc, 0.0))
        safe_a = np.where(ok, a, 1.0)
        sides = []
        for t in ((-b - root) / (2.0 * safe_a), (-b + root) / (2.0 * safe_a)):
            z = origins[:, 2] + t * dirs[:, 2]
            sides.append(np.where(ok & (z >= self.z_min) & (z <= self.z_max), t, np.inf))
        caps = []
        with np.errstate(divide="ignore", invalid="ignore"):
            for zc in (self.z_min, self.z_max):
                t = (zc - origins[:, 2]) / dirs[:, 2]
                px = ox + t * dx
                py = oy + t * dy
                inside = (np.abs(dirs[:, 2]) > EPS) & (px * px + py * py <= self.radius**2)
                caps.append(np.where(inside, t, np.inf))
        return _first_positive(*sides, *caps)

    def contains(self, p: np.ndarray) -> bool:
        cx, cy = self.center
        r2 = (p[0] - cx) ** 2 + (p[1] - cy) ** 2
        return bool(r2 < self.radius**2 and self.z_min < p[2] < self.z_max)


@dataclass(frozen=True)
class Sphere:
    center: tuple[float, float, float]
    radius: float
    intensity: float = 0.9

    def intersect(self, origins: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        oc = origins - np.asarray(self.center)
        b = np.sum(oc * dirs, axis=1)
        c = np.sum(oc * oc, axis=1) - self.radius**2
        disc = b * b - c
        root = np.sqrt(np.where(disc >= 0.0, disc, 0.0))
        t = _first_positive(-b - root, -b + root)
        return np.where(disc >= 0.0, t, np.inf)

    def contains(self, p: np.ndarray) -> bool:
        return float(np.sum((p - np.asarray(self.center)) ** 2)) < self.radius**2


@dataclass
class SyntheticScene:
    primitives: list[Primitive]
    trajectory: list[RigidTransform]
    sensor: SensorModel
    name: str = "scene"
    meta: dict = field(default_factory=dict)


def cast_rays(primitives: Sequence[Primitive], origins: np.ndarray, dirs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(distance, intensity) of the closest hit; distance inf on a miss."""

    best = np.full(len(dirs), np.inf)
    inten = np.zeros(len(dirs))
    for prim in primitives:
        t = prim.intersect(origins, dirs)
        closer = t < best
        best = np.where(closer, t, best)
        inten = np.where(closer, prim.intensity, inten)
    return best, inten


def desk_trajectory(cfg: SceneConfig) -> list[RigidTransform]:
    """Gently curving drive at constant sensor height, heading turning by turn_deg per frame."""

    poses = []
    pos = np.array([0.0, 0.0, cfg.sensor_height])
    for k in range(cfg.n_frames):
        heading = np.deg2rad(cfg.turn_deg) * k
        poses.append(RigidTransform(Rotation.from_euler("z", heading).as_matrix(), pos.copy()))
        next_heading = np.deg2rad(cfg.turn_deg) * (k + 0.5)
        pos = pos + cfg.step * np.array([np.cos(next_heading), np.sin(next_heading), 0.0])
    return poses


def _desk_primitives(trajectory: Sequence[RigidTransform], rng: np.random.Generator) -> list[Primitive]:
    prims: list[Primitive] = [Plane((0.0, 0.0, 1.0), 0.0, intensity=0.25)]
    centers = np.stack([T.t for T in trajectory])
    start, end = centers[0], centers[-1]
    along = np.linspace(-4.0, 4.0 + np.linalg.norm(end - start), 6)
    heading = np.arctan2(end[1] - start[1], end[0] - start[0]) if len(centers) > 1 else 0.0
    fwd = np.array([np.cos(heading), np.sin(heading)])
    left = np.array([-fwd[1], fwd[0]])
    for k, s in enumerate(along):
        for side in (-1.0, 1.0):
            base = start[:2] + s * fwd + side * rng.uniform(5.0, 8.0) * left
            if (k + (side > 0)) % 2 == 0:
                half = rng.uniform(0.6, 1.5, size=2)
                h = rng.uniform(1.0, 3.5)
                prims.append(
                    Box(
                        (base[0] - half[0], base[1] - half[1], 0.0),
                        (base[0] + half[0], base[1] + half[1], h),
                        intensity=float(rng.uniform(0.4, 0.7)),
                    )
                )
            else:
                prims.append(
                    Cylinder(
                        (float(base[0]), float(base[1])),
                        float(rng.uniform(0.2, 0.5)),
                        0.0,
                        float(rng.uniform(2.0, 4.0)),
                        intensity=float(rng.uniform(0.7, 0.95)),
                    )
                )
    # Long walls on both sides give every frame shared structure to register against.
    for side in (-1.0, 1.0):
        mid = start[:2] + 0.5 * (end[:2] - start[:2]) + side * 12.0 * left
        half_len = 0.5 * np.linalg.norm(end - start) + 10.0
        corners = np.stack([mid + a * half_len * fwd + b * 0.5 * left for a in (-1, 1) for b in (-1, 1)])
        lo, hi = corners.min(axis=0), corners.max(axis=0)
        prims.append(Box((lo[0], lo[1], 0.0), (hi[0], hi[1], 5.0), intensity=0.5))
    sphere_at = start[:2] + 0.5 * (end[:2] - start[:2]) + 3.5 * left
    prims.append(Sphere((float(sphere_at[0]), float(sphere_at[1]), 1.0), 0.8, intensity=0.9))
    return prims


def build_scene(cfg: SceneConfig, sensor: SensorModel, seed: int) -> SyntheticScene:
    rng = np.random.default_rng(seed)
    trajectory = desk_trajectory(cfg)
    if cfg.layout == "plane":
        prims: list[Primitive] = [Plane((0.0, 0.0, 1.0), 0.0, intensity=0.3)]
    else:
        prims = _desk_primitives(trajectory, rng)
    return SyntheticScene(prims, trajectory, sensor, name=cfg.layout, meta={"seed": seed})


def render_scan(scene: SyntheticScene, pose: RigidTransform) -> tuple[PointCloud, RangeImage]:
    """Exact scan (sensor frame) and range image for one pose."""

    sensor = scene.sensor
    local = direction_grid(sensor).reshape(-1, 3)
    dirs = local @ pose.R.T
    origins = np.broadcast_to(pose.t, dirs.shape)
    t, inten = cast_rays(scene.primitives, origins, dirs)
    hit = np.isfinite(t) & (t <= sensor.max_range)
    shape = (sensor.beams, sensor.width)
    depth = np.where(hit, t, 0.0).reshape(shape)
    intensity = np.where(hit, inten, 0.0).reshape(shape)
    img = RangeImage(depth, intensity, ~hit.reshape(shape))
    cloud = PointCloud(local[hit] * t[hit, None], inten[hit])
    return cloud, img


def generate_scene(scene: SyntheticScene) -> tuple[list[PointCloud], list[RigidTransform], list[RangeImage]]:
    if len(scene.trajectory) < 2:
        raise GeometryError(f"a scene needs at least 2 poses, got {len(scene.trajectory)}")
    scans, images = [], []
    for k, pose in enumerate(scene.trajectory):
        if any(p.contains(pose.t) for p in scene.primitives):
            logger.warning("frame %d: sensor at %s is inside scene geometry", k, np.round(pose.t, 3).tolist())
        cloud, img = render_scan(scene, pose)
        scans.append(cloud)
        images.append(img)
    return scans, list(scene.trajectory), images


def rotation_noise_angles(n: int, sigma_deg: float, rng: np.random.Generator) -> np.ndarray:
    return rng.normal(0.0, np.deg2rad(sigma_deg), size=n)


def perturb_poses(gt_poses: Sequence[RigidTransform], noise: NoiseSpec) -> list[RigidTransform]:
    """Random-axis rotation with N(0, sigma) angle and N(0, sigma) translation per frame; frame 0 exact."""

    rng = np.random.default_rng(noise.seed)
    out = [gt_poses[0]] if gt_poses else []
    for pose in gt_poses[1:]:
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        angle = rotation_noise_angles(1, noise.rot_sigma_deg, rng)[0]
        dR = Rotation.from_rotvec(axis * angle).as_matrix()
        dt = rng.normal(0.0, noise.trans_sigma_m, size=3)
        out.append(RigidTransform(dR @ pose.R, pose.t + dt))
    return out


def save_scene(directory: str | Path, scans: Sequence[PointCloud], poses: Sequence[RigidTransform]) -> Path:
    root = Path(directory)
    for k, cloud in enumerate(scans):
        write_scan_bin(root / "scans" / f"{k:06d}.bin", cloud)
    write_trajectory(root / "poses.txt", poses)
    return root


def load_scene(directory: str | Path) -> tuple[list[PointCloud], list[RigidTransform]]:
    root = Path(directory)
    paths = sorted((root / "scans").glob("*.bin"))
    if not paths:
        raise GeometryError(f"no scan files under {root / 'scans'}")
    poses = read_trajectory(root / "poses.txt")
    if len(poses) != len(paths):
        raise GeometryError(f"{len(paths)} scans but {len(poses)} poses in {root}")
    return [read_scan_bin(p) for p in paths], poses
