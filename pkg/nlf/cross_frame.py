"""Adversarial cross-frame consistency.

A frame-i cloud is carried into frame j with a relative pose and projected to a
depth image; paired with frame j's own depth it forms a 2-channel image. Real
pairs use ground-truth clouds and poses, fake pairs the rendered cloud and the
estimated poses. A patch discriminator scores both with a hinge loss.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import GeometryError, ShapeError
from .lidar import RangeImage, assign_pixels, pixel_directions
from .nn import Conv2d, Module
from .se3 import PoseParams, RigidTransform
from .types import PairLabel, RayMarchConfig, SensorModel

logger = logging.getLogger(__name__)

MIN_SIDE = 16


@dataclass
class DepthPair:
    channels: Tensor
    label: PairLabel

    def __post_init__(self) -> None:
        if self.channels.ndim != 3 or self.channels.shape[0] != 2:
            raise ShapeError("depth pair", self.channels.shape)

    def batch(self) -> Tensor:
        return self.channels.reshape(1, *self.channels.shape)


class Discriminator(Module):
    """Four stride-2 4x4 convolutions; channels double per layer and end in a 1-channel patch map."""

    def __init__(self, rng: np.random.Generator, *, base: int = 64, in_channels: int = 2) -> None:
        widths = [in_channels, base, base * 2, base * 4, 1]
        self.convs = [Conv2d(widths[k], widths[k + 1], rng) for k in range(4)]

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[2] < MIN_SIDE or x.shape[3] < MIN_SIDE:
            raise ShapeError("discriminator input (needs N x C x >=16 x >=16)", x.shape)
        h = x
        for k, conv in enumerate(self.convs):
            h = conv(h)
            if k < len(self.convs) - 1:
                h = ad.leaky_relu(h, 0.2)
        return h


def avg_pool2(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    x = x[:, :, : h - h % 2, : w - w % 2]
    return x.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))


def disc_forward(disc: Discriminator, pair: DepthPair | Tensor) -> Tensor:
    """(H/16) x (W/16) patch score map of one pair."""

    x = pair.batch() if isinstance(pair, DepthPair) else pair
    out = disc(x)
    return out.reshape(out.shape[2], out.shape[3])


def multiscale_scores(disc: Discriminator, pair: DepthPair) -> list[Tensor]:
    """Score maps at full and, when it still fits, half resolution (shared weights)."""

    x = pair.batch()
    maps = [disc_forward(disc, x)]
    if x.shape[2] >= 2 * MIN_SIDE and x.shape[3] >= 2 * MIN_SIDE:
        maps.append(disc_forward(disc, avg_pool2(x)))
    return maps


def disc_loss(score_real: Tensor | np.ndarray, score_fake: Tensor | np.ndarray) -> Tensor:
    real = ad.relu(1.0 - ad.as_tensor(score_real)).mean()
    fake = ad.relu(1.0 + ad.as_tensor(score_fake)).mean()
    return real + fake


def gen_loss(score_fake: Tensor | np.ndarray) -> Tensor:
    return -ad.as_tensor(score_fake).mean()


def multiscale_disc_loss(disc: Discriminator, real: DepthPair, fake: DepthPair) -> Tensor:
    pairs = list(zip(multiscale_scores(disc, real), multiscale_scores(disc, fake)))
    total = disc_loss(*pairs[0])
    for r, f in pairs[1:]:
        total = total + disc_loss(r, f)
    return total * (1.0 / len(pairs))


def multiscale_gen_loss(disc: Discriminator, fake: DepthPair) -> Tensor:
    maps = multiscale_scores(disc, fake)
    total = gen_loss(maps[0])
    for m in maps[1:]:
        total = total + gen_loss(m)
    return total * (1.0 / len(maps))


def cross_depth(
    points_i: Tensor | np.ndarray,
    Ri: Tensor | np.ndarray,
    ti: Tensor | np.ndarray,
    Rj: Tensor | np.ndarray,
    tj: Tensor | np.ndarray,
    sensor: SensorModel,
) -> Tensor:
    """Depth image in frame j of frame-i sensor points, via Tj^-1 Ti.

    Pixel assignment (nearest wins) is computed on values and then held fixed;
    depths stay differentiable in the points and both poses.
    """

    pts = ad.as_tensor(points_i)
    Ri, ti, Rj, tj = (ad.as_tensor(v) for v in (Ri, ti, Rj, tj))
    shape = (sensor.beams, sensor.width)
    if pts.shape[0] == 0:
        return Tensor(np.zeros(shape))
    in_j = (pts @ Ri.T + ti - tj) @ Rj
    proj = assign_pixels(in_j.data, sensor)
    if len(proj.index) == 0:
        return Tensor(np.zeros(shape))
    hits = ad.take(in_j, proj.index)
    depth = ad.sqrt((hits * hits).sum(axis=1))
    return ad.scatter(depth, proj.rows * sensor.width + proj.cols, shape)


def _pixel_grid(sensor: SensorModel, column_stride: int) -> tuple[np.ndarray, np.ndarray]:
    rows, cols = np.meshgrid(np.arange(sensor.beams), np.arange(0, sensor.width, column_stride), indexing="ij")
    return rows.reshape(-1), cols.reshape(-1)


def make_pairs(
    i: int,
    j: int,
    gt_images: Sequence[RangeImage],
    poses_est: PoseParams,
    poses_gt: Sequence[RigidTransform],
    field,
    sensor: SensorModel,
    march: RayMarchConfig,
    *,
    fusion: float = 1.0,
    column_stride: int = 1,
) -> tuple[DepthPair, DepthPair]:
    """(real, fake) pairs for adjacent frames i -> j.

    The fake pair renders frame i from its estimated pose over every
    ``column_stride``-th column, keeps returns the field does not drop, and
    carries them into frame j with the estimated relative pose. The real pair
    does the same with the ground-truth depth at those pixels and the
    ground-truth relative pose.
    """

    if abs(i - j) != 1:
        raise GeometryError(f"cross-frame pairs need adjacent frames, got ({i}, {j})")
    rows, cols = _pixel_grid(sensor, column_stride)
    local_dirs = pixel_directions(sensor, rows, cols)
    d_j = Tensor(gt_images[j].depth)

    Ri, ti = poses_est.tensors(i)
    Rj, tj = poses_est.tensors(j)
    dirs = Tensor(local_dirs) @ Ri.T
    origins = ad.broadcast_to(ti.reshape(1, 3), dirs.shape)
    out = field.render_rays(origins, dirs, march, fusion)
    keep = np.flatnonzero((out.drop.data <= field.cfg.drop_threshold) & (out.depth.data > 0.0))
    rendered = ad.take(out.depth, keep).reshape(-1, 1) * local_dirs[keep]
    fake_depth = cross_depth(rendered, Ri, ti, Rj, tj, sensor)
    fake = DepthPair(ad.stack([fake_depth, d_j], axis=0), PairLabel.fake)

    gt_i = gt_images[i]
    valid = ~gt_i.drop_mask[rows, cols]
    gt_points = gt_i.depth[rows, cols][valid, None] * local_dirs[valid]
    Ti, Tj = poses_gt[i], poses_gt[j]
    with ad.no_grad():
        real_depth = cross_depth(gt_points, Ti.R, Ti.t, Tj.R, Tj.t, sensor)
    real = DepthPair(Tensor(np.stack([real_depth.data, gt_images[j].depth])), PairLabel.real)
    return real, fake
