"""Spherical range-image projection, ray generation, scene normalisation and scan I/O.

Conventions: column c sits at azimuth -pi + c * 2pi / W (so column W/2 looks down
+x), row 0 is the top beam and beams are spaced equally over the vertical FOV.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import GeometryError, ScanFormatError
from .se3 import RigidTransform
from .types import SensorModel

logger = logging.getLogger(__name__)

PGM_MAXVAL = 256


@dataclass
class PointCloud:
    points: np.ndarray
    intensity: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if self.intensity is None:
            self.intensity = np.zeros(len(self.points))
        self.intensity = np.asarray(self.intensity, dtype=np.float64).reshape(-1)
        if len(self.intensity) != len(self.points):
            raise GeometryError(
                f"point cloud has {len(self.points)} points but {len(self.intensity)} intensities"
            )

    @classmethod
    def empty(cls) -> PointCloud:
        return cls(np.zeros((0, 3)), np.zeros(0))

    def __len__(self) -> int:
        return len(self.points)

    def subset(self, index: np.ndarray) -> PointCloud:
        return PointCloud(self.points[index], self.intensity[index])


@dataclass
class RangeImage:
    depth: np.ndarray
    intensity: np.ndarray
    drop_mask: np.ndarray

    def __post_init__(self) -> None:
        self.depth = np.asarray(self.depth, dtype=np.float64)
        self.intensity = np.asarray(self.intensity, dtype=np.float64)
        self.drop_mask = np.asarray(self.drop_mask, dtype=bool)
        if not (self.depth.shape == self.intensity.shape == self.drop_mask.shape) or self.depth.ndim != 2:
            raise GeometryError(
                f"range image channels disagree: {self.depth.shape}, {self.intensity.shape}, {self.drop_mask.shape}"
            )

    @classmethod
    def empty(cls, sensor: SensorModel) -> RangeImage:
        shape = (sensor.beams, sensor.width)
        return cls(np.zeros(shape), np.zeros(shape), np.ones(shape, dtype=bool))

    @property
    def height(self) -> int:
        return self.depth.shape[0]

    @property
    def width(self) -> int:
        return self.depth.shape[1]

    @property
    def valid(self) -> np.ndarray:
        return ~self.drop_mask


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    pixel: tuple[int, int]


def azimuths(sensor: SensorModel) -> np.ndarray:
    return -np.pi + np.arange(sensor.width) * (2.0 * np.pi / sensor.width)


def beam_spacing(sensor: SensorModel) -> float:
    """Angular spacing between beams in radians."""

    if sensor.beams == 1:
        return np.deg2rad(sensor.vfov_deg)
    return np.deg2rad(sensor.vfov_deg) / (sensor.beams - 1)


def elevations(sensor: SensorModel) -> np.ndarray:
    return np.deg2rad(sensor.vfov_offset_deg) - np.arange(sensor.beams) * beam_spacing(sensor)


def pixel_directions(sensor: SensorModel, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """Unit directions in the sensor frame for pixel index arrays."""

    az = azimuths(sensor)[cols]
    el = elevations(sensor)[rows]
    ce = np.cos(el)
    return np.stack([ce * np.cos(az), ce * np.sin(az), np.sin(el)], axis=-1)


def direction_grid(sensor: SensorModel) -> np.ndarray:
    rows, cols = np.meshgrid(np.arange(sensor.beams), np.arange(sensor.width), indexing="ij")
    return pixel_directions(sensor, rows, cols)


def _check_pixels(sensor: SensorModel, rows: np.ndarray, cols: np.ndarray) -> None:
    bad = (rows < 0) | (rows >= sensor.beams) | (cols < 0) | (cols >= sensor.width)
    if np.any(bad):
        k = int(np.argmax(bad))
        raise GeometryError(
            f"pixel ({rows[k]}, {cols[k]}) outside {sensor.beams}x{sensor.width} image"
        )


def make_ray_batch(
    sensor: SensorModel, pose: RigidTransform, rows: np.ndarray, cols: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """(origins, directions) arrays for pixel index arrays under ``pose``."""

    rows = np.asarray(rows, dtype=np.int64).reshape(-1)
    cols = np.asarray(cols, dtype=np.int64).reshape(-1)
    _check_pixels(sensor, rows, cols)
    dirs = pixel_directions(sensor, rows, cols) @ pose.R.T
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    origins = np.broadcast_to(pose.t, dirs.shape).copy()
    return origins, dirs


def make_rays(sensor: SensorModel, pose: RigidTransform, pixels: Sequence[tuple[int, int]]) -> list[Ray]:
    if not pixels:
        return []
    px = np.asarray(pixels, dtype=np.int64).reshape(-1, 2)
    origins, dirs = make_ray_batch(sensor, pose, px[:, 0], px[:, 1])
    return [Ray(o, d, (int(r), int(c))) for o, d, (r, c) in zip(origins, dirs, px)]


@dataclass(frozen=True)
class Projection:
    """Pixel assignment of a cloud: surviving point indices and their pixels."""

    index: np.ndarray
    rows: np.ndarray
    cols: np.ndarray
    depth: np.ndarray
    discarded: int


def assign_pixels(points: np.ndarray, sensor: SensorModel) -> Projection:
    """Nearest-point-wins pixel assignment; ties go to the lowest point index."""

    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    depth = np.linalg.norm(pts, axis=1)
    nonzero = depth > 0.0
    safe = np.where(nonzero, depth, 1.0)
    az = np.arctan2(pts[:, 1], pts[:, 0])
    el = np.arcsin(np.clip(pts[:, 2] / safe, -1.0, 1.0))
    cols = np.rint((az + np.pi) * sensor.width / (2.0 * np.pi)).astype(np.int64) % sensor.width
    rows = np.rint((np.deg2rad(sensor.vfov_offset_deg) - el) / beam_spacing(sensor)).astype(np.int64)
    inside = nonzero & (rows >= 0) & (rows < sensor.beams)
    discarded = int(len(pts) - np.count_nonzero(inside))

    idx = np.flatnonzero(inside)
    flat = rows[idx] * sensor.width + cols[idx]
    order = np.lexsort((idx, depth[idx], flat))
    _, first = np.unique(flat[order], return_index=True)
    keep = idx[order[first]]
    return Projection(keep, rows[keep], cols[keep], depth[keep], discarded)


def project(cloud: PointCloud, sensor: SensorModel) -> RangeImage:
    proj = assign_pixels(cloud.points, sensor)
    if proj.discarded:
        logger.debug("projection discarded %d points outside the vertical FOV", proj.discarded)
    img = RangeImage.empty(sensor)
    img.depth[proj.rows, proj.cols] = proj.depth
    img.intensity[proj.rows, proj.cols] = cloud.intensity[proj.index]
    img.drop_mask[proj.rows, proj.cols] = False
    return img


def unproject(img: RangeImage, sensor: SensorModel) -> PointCloud:
    if img.depth.shape != (sensor.beams, sensor.width):
        raise GeometryError(f"image {img.depth.shape} does not match sensor {sensor.beams}x{sensor.width}")
    rows, cols = np.nonzero(~img.drop_mask)
    dirs = pixel_directions(sensor, rows, cols)
    return PointCloud(dirs * img.depth[rows, cols, None], img.intensity[rows, cols])


@dataclass(frozen=True)
class SceneNormalization:
    """x' = (x - center) * scale + 0.5 maps the scene into the unit cube."""

    scale: float
    center: np.ndarray

    def forward(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - self.center) * self.scale + 0.5

    def inverse(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - 0.5) / self.scale + self.center

    def pose_forward(self, T: RigidTransform) -> RigidTransform:
        """Sensor pose in unit-cube coordinates; sensor-frame points scale by ``scale``."""

        return RigidTransform(T.R, self.forward(T.t))

    def pose_inverse(self, T: RigidTransform) -> RigidTransform:
        return RigidTransform(T.R, self.inverse(T.t))


def fit_normalization(point_sets: Sequence[np.ndarray], margin: float = 0.05) -> SceneNormalization:
    pts = [np.asarray(p, dtype=np.float64).reshape(-1, 3) for p in point_sets]
    pts = [p for p in pts if len(p)]
    if not pts:
        raise GeometryError("cannot normalise an empty scene")
    union = np.concatenate(pts)
    lo, hi = union.min(axis=0), union.max(axis=0)
    extent = float(np.max(hi - lo))
    center = (lo + hi) / 2.0
    if extent <= 0.0:
        return SceneNormalization(1.0, center)
    return SceneNormalization((1.0 - 2.0 * margin) / extent, center)


def normalize_scene(clouds: Sequence[PointCloud]) -> tuple[list[PointCloud], SceneNormalization]:
    record = fit_normalization([c.points for c in clouds])
    return [PointCloud(record.forward(c.points), c.intensity.copy()) for c in clouds], record


def voxel_downsample(points: np.ndarray, voxel: float, max_points: int | None = None) -> np.ndarray:
    """Indices of the first point (in index order) of every occupied voxel.

    ``max_points`` thins the result with an even stride, keeping the order.
    """

    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        return np.zeros(0, dtype=np.int64)
    keys = np.floor(pts / voxel).astype(np.int64)
    _, first = np.unique(keys, axis=0, return_index=True)
    keep = np.sort(first)
    if max_points is not None and len(keep) > max_points:
        pick = np.linspace(0, len(keep) - 1, max_points).round().astype(np.int64)
        keep = keep[np.unique(pick)]
    return keep


# ---------------------------------------------------------------- file formats


def read_scan_bin(path: str | Path) -> PointCloud:
    """Little-endian float32 (x, y, z, intensity) records."""

    blob = Path(path).read_bytes()
    tail = len(blob) % 16
    if tail:
        raise ScanFormatError(f"truncated scan record in {path}", offset=len(blob) - tail)
    rec = np.frombuffer(blob, dtype="<f4").reshape(-1, 4).astype(np.float64)
    return PointCloud(rec[:, :3], np.clip(rec[:, 3], 0.0, 1.0))


def write_scan_bin(path: str | Path, cloud: PointCloud) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    rec = np.concatenate([cloud.points, cloud.intensity[:, None]], axis=1).astype("<f4")
    p.write_bytes(rec.tobytes())
    return p


def write_trajectory(path: str | Path, poses: Sequence[RigidTransform]) -> Path:
    """One line per pose: row-major 3x4 [R|t], shortest round-tripping float text."""

    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    lines = [" ".join(repr(float(v)) for v in T.matrix()[:3].reshape(-1)) for T in poses]
    p.write_text("\n".join(lines) + ("\n" if lines else ""))
    return p


def read_trajectory(path: str | Path) -> list[RigidTransform]:
    out: list[RigidTransform] = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            values = [float(v) for v in line.split()]
        except ValueError:
            raise ScanFormatError(f"{path}:{lineno}: non-numeric trajectory entry") from None
        if len(values) != 12:
            raise ScanFormatError(f"{path}:{lineno}: expected 12 values, got {len(values)}")
        out.append(RigidTransform.from_matrix(np.asarray(values).reshape(3, 4)))
    return out


def encode_pgm(values: np.ndarray, scale: float) -> bytes:
    """16-bit binary PGM (maxval 256) of round(values * scale), clipped."""

    arr = np.clip(np.rint(np.asarray(values, dtype=np.float64) * scale), 0, PGM_MAXVAL).astype(">u2")
    h, w = arr.shape
    return f"P5\n{w} {h}\n{PGM_MAXVAL}\n".encode("ascii") + arr.tobytes()


def write_pgm(path: str | Path, values: np.ndarray, scale: float) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_bytes(encode_pgm(values, scale))
    return p


def read_pgm(path: str | Path) -> np.ndarray:
    blob = Path(path).read_bytes()
    parts = blob.split(b"\n", 3)
    if len(parts) < 4 or parts[0] != b"P5":
        raise ScanFormatError(f"{path} is not a binary PGM", offset=0)
    w, h = (int(v) for v in parts[1].split())
    maxval = int(parts[2])
    dtype = ">u2" if maxval > 255 else "u1"
    return np.frombuffer(parts[3], dtype=dtype, count=w * h).reshape(h, w).astype(np.int64)


def write_range_image(prefix: str | Path, img: RangeImage, sensor: SensorModel) -> list[Path]:
    """depth / intensity / drop PGMs side by side under ``prefix``."""

    prefix = Path(prefix)
    return [
        write_pgm(prefix.with_name(prefix.name + "_depth.pgm"), img.depth, PGM_MAXVAL / sensor.max_range),
        write_pgm(prefix.with_name(prefix.name + "_intensity.pgm"), img.intensity, PGM_MAXVAL),
        write_pgm(prefix.with_name(prefix.name + "_drop.pgm"), img.drop_mask.astype(np.float64), PGM_MAXVAL),
    ]
