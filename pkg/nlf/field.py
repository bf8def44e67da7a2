"""Hybrid spectral-geometric LiDAR field and its volume renderer.

Everything here works in unit-cube scene coordinates: sample points, depths and
near/far bounds are normalised units.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ShapeError
from .lidar import RangeImage, Ray, direction_grid, write_range_image
from .nn import MLP, Module
from .se3 import RigidTransform
from .spectral import EigenfunctionSet
from .types import FieldConfig, HashGridConfig, LossWeights, RayMarchConfig, SensorModel

logger = logging.getLogger(__name__)

_PRIMES = (np.uint64(1), np.uint64(2654435761), np.uint64(805459861))
# Corner bit patterns (x, y, z) of a voxel.
_CORNERS = np.array([[(k >> 0) & 1, (k >> 1) & 1, (k >> 2) & 1] for k in range(8)], dtype=np.int64)


class HashGrid(Module):
    """Multi-resolution hash encoding with trilinear interpolation per level.

    Levels whose (res + 1)^3 vertices fit into the table are indexed densely;
    finer levels use the XOR-prime spatial hash modulo the table size.
    """

    def __init__(self, cfg: HashGridConfig, rng: np.random.Generator) -> None:
        self.cfg = cfg
        table_size = 1 << cfg.table_size_log2
        self.resolutions = [cfg.resolution(level) for level in range(cfg.levels)]
        self.dense = [(n + 1) ** 3 <= table_size for n in self.resolutions]
        self.tables = []
        for n, dense in zip(self.resolutions, self.dense):
            rows = (n + 1) ** 3 if dense else table_size
            init = rng.uniform(-cfg.init_scale, cfg.init_scale, size=(rows, cfg.features_per_level))
            self.tables.append(ad.parameter(init))
        self._mask = np.uint64(table_size - 1)

    @property
    def output_dim(self) -> int:
        return self.cfg.output_dim

    def vertex_index(self, level: int, corner: np.ndarray) -> np.ndarray:
        n = self.resolutions[level]
        if self.dense[level]:
            return corner[..., 0] + (n + 1) * (corner[..., 1] + (n + 1) * corner[..., 2])
        c = corner.astype(np.uint64)
        h = (c[..., 0] * _PRIMES[0]) ^ (c[..., 1] * _PRIMES[1]) ^ (c[..., 2] * _PRIMES[2])
        return (h & self._mask).astype(np.int64)

    def __call__(self, x: Tensor) -> Tensor:
        x = ad.clip(ad.as_tensor(x), 0.0, 1.0)
        n_pts = x.shape[0]
        feats = []
        for level, table in enumerate(self.tables):
            n = self.resolutions[level]
            scaled = x * float(n)
            base = np.minimum(np.floor(scaled.data).astype(np.int64), n - 1)
            frac = scaled - base
            lo_hi = ad.stack([1.0 - frac, frac], axis=2)  # (P, 3, 2)
            wx = lo_hi[:, 0, :][:, _CORNERS[:, 0]]
            wy = lo_hi[:, 1, :][:, _CORNERS[:, 1]]
            wz = lo_hi[:, 2, :][:, _CORNERS[:, 2]]
            weights = (wx * wy * wz).reshape(n_pts, 8, 1)
            idx = self.vertex_index(level, base[:, None, :] + _CORNERS[None, :, :])
            values = ad.take(table, idx)  # (P, 8, F)
            feats.append((values * weights).sum(axis=1))
        return ad.concat(feats, axis=1)


def hash_encode(x: np.ndarray | Tensor, grid: HashGrid) -> Tensor:
    x = ad.as_tensor(x)
    squeeze = x.ndim == 1
    out = grid(x.reshape(1, 3) if squeeze else x)
    return out.reshape(grid.output_dim) if squeeze else out


def view_encoding(d: Tensor, bands: int) -> Tensor:
    """[d, sin(2^k pi d), cos(2^k pi d)] for k < bands."""

    parts = [d]
    for k in range(bands):
        arg = d * (np.pi * 2.0**k)
        parts.append(ad.sin(arg))
        parts.append(ad.cos(arg))
    return ad.concat(parts, axis=-1)


@dataclass
class HybridFeature:
    f_geo: Tensor
    f_spe: Tensor
    f_hyb: Tensor


@dataclass
class RenderOutput:
    depth: Tensor
    intensity: Tensor
    drop: Tensor
    opacity: Tensor
    weights: Tensor | None = None


@dataclass
class RawRender:
    depth: np.ndarray
    intensity: np.ndarray
    drop: np.ndarray
    opacity: np.ndarray


def fusion_weight(step: int, total_iters: int, ramp_frac: float = 0.5) -> float:
    """Linear 0 -> 1 over the first ``ramp_frac`` of training, then 1."""

    span = max(ramp_frac * total_iters, 1.0)
    return float(min(max(step / span, 0.0), 1.0))


def sample_depths(march: RayMarchConfig, n_rays: int, rng: np.random.Generator | None = None) -> tuple[np.ndarray, float]:
    """(z, delta): per-ray sample depths (R, N) and the uniform spacing."""

    n = march.samples_per_ray
    delta = (march.far - march.near) / (n - 1)
    z = np.broadcast_to(np.linspace(march.near, march.far, n), (n_rays, n)).copy()
    if march.stratified and rng is not None:
        jitter = rng.uniform(0.0, 1.0, size=(n_rays, n)) * delta
        jitter[:, -1] = 0.0
        z += jitter
    return z, delta


def composite(sigma: Tensor, delta: float | np.ndarray) -> tuple[Tensor, Tensor]:
    """Volume-rendering weights w_i = T_i (1 - exp(-sigma_i delta_i)) and opacity sum(w)."""

    sigma = ad.as_tensor(sigma)
    tau = sigma * delta
    before = ad.cumsum(tau, axis=-1) - tau
    weights = ad.exp(-before) * (1.0 - ad.exp(-tau))
    return weights, weights.sum(axis=-1)


class NeuralField(Module):
    def __init__(
        self,
        grid_cfg: HashGridConfig,
        field_cfg: FieldConfig,
        rng: np.random.Generator,
        *,
        eigenfunctions: EigenfunctionSet | None = None,
        spectral_dim: int = 8,
    ) -> None:
        self.cfg = field_cfg
        self.grid = HashGrid(grid_cfg, rng)
        self.spectral_dim = eigenfunctions.K if eigenfunctions is not None else spectral_dim
        self.eigenfunctions = eigenfunctions
        hyb = self.grid.output_dim + self.spectral_dim
        view = 3 + 6 * field_cfg.view_bands
        h = field_cfg.hidden
        self.trunk = MLP([hyb, h, field_cfg.feature_dim + 1], rng, activation="relu")
        self.intensity_head = MLP([field_cfg.feature_dim + view, h, h, 1], rng, activation="relu")
        self.drop_head = MLP([field_cfg.feature_dim + view, h, h, 1], rng, activation="relu")

    def named_parameters(self, prefix: str = ""):
        # The eigenfunctions are trained by the spectral loss only.
        for name, p in super().named_parameters(prefix):
            if not name.startswith(prefix + "eigenfunctions."):
                yield name, p

    def hybrid_query(self, x: np.ndarray | Tensor, fusion: float) -> HybridFeature:
        x = ad.as_tensor(x)
        squeeze = x.ndim == 1
        pts = x.reshape(1, 3) if squeeze else x
        f_geo = self.grid(pts)
        if self.eigenfunctions is not None:
            with ad.no_grad():
                f_spe = self.eigenfunctions.embed(pts.detach())
        else:
            f_spe = Tensor(np.zeros((pts.shape[0], self.spectral_dim)))
        f_hyb = ad.concat([f_geo, f_spe * float(fusion)], axis=1)
        if squeeze:
            return HybridFeature(f_geo.reshape(-1), f_spe.reshape(-1), f_hyb.reshape(-1))
        return HybridFeature(f_geo, f_spe, f_hyb)

    def query(self, x: Tensor, view: Tensor, fusion: float) -> tuple[Tensor, Tensor, Tensor]:
        """Density, intensity and drop probability for points (P, 3) with view codes (P, V)."""

        trunk = self.trunk(self.hybrid_query(x, fusion).f_hyb)
        k = self.cfg.feature_dim
        feature = trunk[:, :k]
        sigma = ad.softplus(trunk[:, k] + self.cfg.density_bias)
        inside = np.all((x.data >= 0.0) & (x.data <= 1.0), axis=1)
        sigma = sigma * inside
        head_in = ad.concat([feature, view], axis=1)
        intensity = ad.sigmoid(self.intensity_head(head_in)).reshape(-1)
        drop = ad.sigmoid(self.drop_head(head_in)).reshape(-1)
        return sigma, intensity, drop

    def render_rays(
        self,
        origins: np.ndarray | Tensor,
        dirs: np.ndarray | Tensor,
        march: RayMarchConfig,
        fusion: float,
        rng: np.random.Generator | None = None,
    ) -> RenderOutput:
        o = ad.as_tensor(origins)
        d = ad.as_tensor(dirs)
        if o.shape != d.shape or o.ndim != 2 or o.shape[1] != 3:
            raise ShapeError("render_rays", o.shape, d.shape)
        n_rays = o.shape[0]
        z, delta = sample_depths(march, n_rays, rng)
        n = z.shape[1]
        zt = Tensor(z[:, :, None])
        pts = o.reshape(n_rays, 1, 3) + zt * d.reshape(n_rays, 1, 3)
        view = view_encoding(d, self.cfg.view_bands)
        view = ad.broadcast_to(view.reshape(n_rays, 1, -1), (n_rays, n, view.shape[1]))
        sigma, inten, drop = self.query(pts.reshape(n_rays * n, 3), view.reshape(n_rays * n, -1), fusion)
        sigma = sigma.reshape(n_rays, n)
        weights, opacity = composite(sigma, delta)
        depth = (weights * z).sum(axis=1)
        intensity = (weights * inten.reshape(n_rays, n)).sum(axis=1)
        drop_prob = (weights * drop.reshape(n_rays, n)).sum(axis=1)
        return RenderOutput(depth, intensity, drop_prob, opacity, weights)

    def render_ray(self, ray: Ray, march: RayMarchConfig, fusion: float = 1.0) -> tuple[float, float, float, float]:
        with ad.no_grad():
            out = self.render_rays(ray.origin[None], ray.direction[None], march, fusion)
        return out.depth.item(), out.intensity.item(), out.drop.item(), out.opacity.item()

    def render_view_raw(
        self, pose: RigidTransform, sensor: SensorModel, march: RayMarchConfig, fusion: float = 1.0
    ) -> RawRender:
        dirs = direction_grid(sensor).reshape(-1, 3) @ pose.R.T
        origins = np.broadcast_to(pose.t, dirs.shape)
        chunks: list[tuple[np.ndarray, ...]] = []
        with ad.no_grad():
            for start in range(0, len(dirs), march.chunk):
                sl = slice(start, start + march.chunk)
                out = self.render_rays(origins[sl], dirs[sl], march, fusion)
                chunks.append((out.depth.data, out.intensity.data, out.drop.data, out.opacity.data))
        shape = (sensor.beams, sensor.width)
        depth, inten, drop, opac = (np.concatenate(c).reshape(shape) for c in zip(*chunks))
        return RawRender(depth, inten, drop, opac)

    def render_view(
        self, pose: RigidTransform, sensor: SensorModel, march: RayMarchConfig, fusion: float = 1.0
    ) -> RangeImage:
        return to_range_image(self.render_view_raw(pose, sensor, march, fusion), self.cfg.drop_threshold)


def to_range_image(raw: RawRender, threshold: float = 0.5) -> RangeImage:
    dropped = raw.drop > threshold
    return RangeImage(
        np.where(dropped, 0.0, raw.depth),
        np.where(dropped, 0.0, np.clip(raw.intensity, 0.0, 1.0)),
        dropped,
    )


def range_loss(pred: RenderOutput, gt: RangeImage, weights: LossWeights) -> Tensor:
    """lambda_d mean|dD| + lambda_i mean dI^2 over valid gt pixels, plus lambda_p mean dP^2 over all."""

    if pred.depth.shape != gt.depth.shape:
        raise ShapeError("range_loss", pred.depth.shape, gt.depth.shape)
    valid = gt.valid.astype(np.float64)
    n_valid = max(float(valid.sum()), 1.0)
    depth_term = (ad.abs_(pred.depth - gt.depth) * valid).sum() * (weights.lambda_d / n_valid)
    di = pred.intensity - gt.intensity
    intensity_term = (di * di * valid).sum() * (weights.lambda_i / n_valid)
    dp = pred.drop - gt.drop_mask.astype(np.float64)
    drop_term = (dp * dp).mean() * weights.lambda_p
    return depth_term + intensity_term + drop_term


def dump_render(prefix: str | Path, img: RangeImage, sensor: SensorModel, meta: dict) -> list[Path]:
    """PGM channels plus a JSON sidecar describing how they were rendered."""

    paths = write_range_image(prefix, img, sensor)
    sidecar = Path(prefix).with_name(Path(prefix).name + ".json")
    body = {"height": img.height, "width": img.width, "depth_scale": 256.0 / sensor.max_range, **meta}
    sidecar.write_text(json.dumps(body, indent=2, sort_keys=True))
    return [*paths, sidecar]
