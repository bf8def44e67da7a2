"""Learned Laplace-Beltrami eigenfunctions on a neural surface.

A NeuralSurface maps the unit sphere into the scene. Samples drawn area-uniformly
on it carry a quadrature weight (their share of the surface area) which every
integral below uses in place of dA.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from . import autodiff as ad
from .autodiff import Adam, Tensor
from .errors import GeometryError, ShapeError
from .lidar import write_pgm
from .nn import MLP, Module
from .types import SpectralConfig

logger = logging.getLogger(__name__)

AREA_FLOOR = 1e-24


def uniform_sphere(n: int, rng: np.random.Generator) -> np.ndarray:
    v = rng.normal(size=(n, 3))
    norm = np.linalg.norm(v, axis=1, keepdims=True)
    norm[norm == 0.0] = 1.0
    return v / norm


def sphere_frame(u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Orthonormal tangent vectors (e1, e2) of the unit sphere at each u."""

    ref = np.where(np.abs(u[:, 2:3]) < 0.9, np.array([[0.0, 0.0, 1.0]]), np.array([[1.0, 0.0, 0.0]]))
    e1 = np.cross(ref, u)
    e1 /= np.linalg.norm(e1, axis=1, keepdims=True)
    e2 = np.cross(u, e1)
    return e1, e2


class NeuralSurface(Module):
    """f(u) = center + axes * u + mlp(u); the residual MLP starts at zero (an ellipsoid)."""

    def __init__(
        self,
        rng: np.random.Generator,
        *,
        hidden: int = 64,
        center: np.ndarray | None = None,
        axes: np.ndarray | None = None,
    ) -> None:
        self.center = np.zeros(3) if center is None else np.asarray(center, dtype=np.float64)
        self.axes = np.ones(3) if axes is None else np.asarray(axes, dtype=np.float64)
        self.mlp = MLP([3, hidden, hidden, 3], rng, activation="softplus", zero_last=True)

    @classmethod
    def from_points(cls, points: np.ndarray, rng: np.random.Generator, *, hidden: int = 64) -> NeuralSurface:
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        lo, hi = pts.min(axis=0), pts.max(axis=0)
        return cls(rng, hidden=hidden, center=(lo + hi) / 2.0, axes=np.maximum((hi - lo) / 2.0, 1e-3))

    def __call__(self, u: np.ndarray | Tensor) -> Tensor:
        u = ad.as_tensor(u)
        return u * self.axes + self.center + self.mlp(u)

    def with_tangents(self, u: np.ndarray) -> tuple[Tensor, Tensor, Tensor]:
        """Surface points and the two partials of the map along the sphere frame at u."""

        e1, e2 = sphere_frame(u)
        ut = Tensor(u)
        out, (d1, d2) = self.mlp.jvp(ut, [Tensor(e1), Tensor(e2)])
        x = ut * self.axes + self.center + out
        return x, d1 + e1 * self.axes, d2 + e2 * self.axes


class EigenfunctionSet(Module):
    """K learned eigenfunctions of 3D position; the constant one is implicit."""

    def __init__(self, rng: np.random.Generator, *, K: int = 8, hidden: int = 64) -> None:
        self.K = K
        self.mlp = MLP([3, hidden, hidden, K], rng, activation="softplus")

    def embed(self, x: np.ndarray | Tensor) -> Tensor:
        return self.mlp(ad.as_tensor(x))

    def values_and_gradients(self, x: Tensor) -> tuple[Tensor, Tensor]:
        """Psi (M, K) and its spatial gradient (M, 3, K)."""

        n = x.shape[0]
        basis = [Tensor(np.broadcast_to(np.eye(3)[k], (n, 3)).copy()) for k in range(3)]
        psi, partials = self.mlp.jvp(x, basis)
        return psi, ad.stack(partials, axis=1)


def spectral_embed(x: np.ndarray | Tensor, eigs: EigenfunctionSet) -> Tensor:
    x = ad.as_tensor(x)
    if x.ndim == 1:
        return eigs.embed(x.reshape(1, 3)).reshape(eigs.K)
    return eigs.embed(x)


@dataclass
class SurfaceSample:
    x_hat: np.ndarray
    t1: np.ndarray
    t2: np.ndarray
    n: np.ndarray
    dA: float


@dataclass
class SurfaceBatch:
    """Differentiable samples: points, tangents, unit normals, area elements and quadrature weights."""

    x: Tensor
    t1: Tensor
    t2: Tensor
    n: Tensor
    dA: Tensor
    weight: Tensor
    u: np.ndarray
    candidates: int

    def __len__(self) -> int:
        return self.x.shape[0]

    def samples(self) -> list[SurfaceSample]:
        return [
            SurfaceSample(self.x.data[k], self.t1.data[k], self.t2.data[k], self.n.data[k], float(self.dA.data[k]))
            for k in range(len(self))
        ]


def area_element(t1: np.ndarray | Tensor, t2: np.ndarray | Tensor) -> Tensor:
    """sqrt(E G - F^2) for tangent rows; clamped at zero before the root."""

    a, b = ad.as_tensor(t1), ad.as_tensor(t2)
    E = (a * a).sum(axis=-1)
    G = (b * b).sum(axis=-1)
    F = (a * b).sum(axis=-1)
    disc = E * G - F * F
    if disc.requires_grad:
        return ad.sqrt(ad.clip(disc, AREA_FLOOR, np.inf))
    return Tensor(np.sqrt(np.clip(disc.data, 0.0, None)))


def _cross(a: Tensor, b: Tensor) -> Tensor:
    ax, ay, az = a[:, 0], a[:, 1], a[:, 2]
    bx, by, bz = b[:, 0], b[:, 1], b[:, 2]
    return ad.stack([ay * bz - az * by, az * bx - ax * bz, ax * by - ay * bx], axis=1)


def unit_normal(t1: Tensor, t2: Tensor) -> Tensor:
    c = _cross(t1, t2)
    return c / ad.sqrt((c * c).sum(axis=1, keepdims=True) + AREA_FLOOR)


def _area_numeric(surface: NeuralSurface, u: np.ndarray) -> np.ndarray:
    with ad.no_grad():
        _, t1, t2 = surface.with_tangents(u)
        return area_element(t1, t2).data


def sample_surface(
    surface: NeuralSurface, M: int, rng: np.random.Generator, *, pilot: int = 1024
) -> SurfaceBatch:
    """M area-uniform samples by rejection from uniform sphere parameters.

    The acceptance bound is the pilot's largest area element inflated by 5%.
    Each sample's weight is dA_j * 4pi / (N_c * q_j) with q_j = dA_j / dA_max
    held constant, so its value is total_area / M and gradients flow through dA.
    """

    if M < 1:
        raise GeometryError(f"sample count must be >= 1, got {M}")
    pilot_area = _area_numeric(surface, uniform_sphere(pilot, rng))
    area_max = float(pilot_area.max()) * 1.05
    if not np.isfinite(area_max) or area_max <= 0.0:
        raise GeometryError("surface has zero area; cannot sample")

    accepted: list[np.ndarray] = []
    n_accepted = 0
    drawn = 0
    batch = max(2 * M, 256)
    while n_accepted < M:
        u = uniform_sphere(batch, rng)
        dA = _area_numeric(surface, u)
        keep = rng.uniform(size=batch) * area_max < dA
        take = u[keep][: M - n_accepted]
        if len(take) < int(keep.sum()):
            # Only count candidates up to the last accepted one.
            last = np.flatnonzero(keep)[len(take) - 1]
            drawn += int(last) + 1
        else:
            drawn += batch
        accepted.append(take)
        n_accepted += len(take)
        if drawn > 10_000 * M:
            raise GeometryError("rejection sampling stalled; surface area is concentrated in a tiny region")
    u = np.concatenate(accepted)

    x, t1, t2 = surface.with_tangents(u)
    dA = area_element(t1, t2)
    q = np.maximum(dA.data / area_max, AREA_FLOOR)
    weight = dA * (4.0 * np.pi / (drawn * q))
    return SurfaceBatch(x, t1, t2, unit_normal(t1, t2), dA, weight, u, drawn)


def surface_gradient(grad3d: np.ndarray | Tensor, n: np.ndarray | Tensor) -> Tensor:
    """Tangential part g - <g, n> n. Accepts (..., 3) or (M, 3, K) gradients with (M, 3) normals."""

    g, nn_ = ad.as_tensor(grad3d), ad.as_tensor(n)
    if g.ndim == nn_.ndim + 1:
        nk = nn_.reshape(*nn_.shape, 1)
        return g - nk * (g * nk).sum(axis=-2, keepdims=True)
    return g - nn_ * (g * nn_).sum(axis=-1, keepdims=True)


def rayleigh_quotient(psi: np.ndarray | Tensor, grads: np.ndarray | Tensor, dA: np.ndarray | Tensor) -> Tensor:
    """sum ||grad psi||^2 dA / sum psi^2 dA; per column when psi is (M, K)."""

    psi, grads, w = ad.as_tensor(psi), ad.as_tensor(grads), ad.as_tensor(dA)
    if psi.shape[0] != grads.shape[0] or psi.shape[0] != w.shape[0]:
        raise ShapeError("rayleigh_quotient", psi.shape, grads.shape, w.shape)
    wcol = w.reshape(-1, 1) if psi.ndim == 2 else w
    energy = (grads * grads).sum(axis=1)
    num = (energy * wcol).sum(axis=0)
    den = (psi * psi * wcol).sum(axis=0)
    if np.any(np.abs(den.data) <= 0.0):
        raise GeometryError("Rayleigh quotient undefined: psi vanishes on every sample")
    return num / den


def gram(psi: np.ndarray | Tensor, dA: np.ndarray | Tensor) -> Tensor:
    psi, w = ad.as_tensor(psi), ad.as_tensor(dA)
    return psi.T @ (psi * w.reshape(-1, 1))


def ortho_loss(psi: np.ndarray | Tensor, dA: np.ndarray | Tensor) -> Tensor:
    """Squared off-diagonal correlations of the columns of ``psi``.

    Columns are normalised by their own weighted norm first, so the penalty
    does not change when a column is rescaled and shrinking every function
    toward zero does not make it vanish.
    """

    g = gram(psi, dA)
    eye = np.eye(g.shape[0])
    diag = (g * eye).sum(axis=1)
    if np.any(diag.data <= 0.0):
        raise GeometryError("orthogonality undefined: a column vanishes on every sample")
    scale = ad.sqrt(diag.reshape(-1, 1) * diag.reshape(1, -1))
    corr = g / scale
    return (corr * corr * (1.0 - eye)).sum()


def norm_loss(psi: np.ndarray | Tensor, dA: np.ndarray | Tensor) -> Tensor:
    g = gram(psi, dA)
    diag = (g * np.eye(g.shape[0])).sum(axis=1)
    return ((diag - 1.0) * (diag - 1.0)).sum()


@dataclass
class SpectralTerms:
    total: Tensor
    rayleigh: np.ndarray
    norm: float
    ortho: float


def spectral_terms(
    surface: NeuralSurface, eigs: EigenfunctionSet, cfg: SpectralConfig, rng: np.random.Generator
) -> SpectralTerms:
    batch = sample_surface(surface, cfg.M, rng, pilot=cfg.pilot)
    psi, grads = eigs.values_and_gradients(batch.x)
    tangential = surface_gradient(grads, batch.n)
    quotients = rayleigh_quotient(psi, tangential, batch.weight)
    # The constant eigenfunction joins the orthogonality penalty so learned ones stay non-constant.
    psi0 = Tensor(np.full((len(batch), 1), 1.0 / np.sqrt(batch.weight.data.sum())))
    l_ortho = ortho_loss(ad.concat([psi0, psi], axis=1), batch.weight)
    l_norm = norm_loss(psi, batch.weight)
    total = quotients.sum() + cfg.lambda_n * l_norm + cfg.lambda_o * l_ortho
    return SpectralTerms(total, quotients.data.copy(), l_norm.item(), l_ortho.item())


def spectral_loss(
    surface: NeuralSurface, eigs: EigenfunctionSet, cfg: SpectralConfig, rng: np.random.Generator
) -> Tensor:
    return spectral_terms(surface, eigs, cfg, rng).total


def fit_surface(
    surface: NeuralSurface,
    points: np.ndarray,
    *,
    steps: int,
    n_samples: int,
    lr: float,
    rng: np.random.Generator,
    symmetric: bool = True,
) -> float:
    """Pull the surface onto ``points`` with a Chamfer loss between uniform samples and the cloud.

    The one-sided variant only pulls samples onto the cloud and lets the surface
    shrink onto a patch of it; the symmetric one also pulls the surface out to
    every part of the cloud.
    """

    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0 or steps == 0:
        return 0.0
    tree = cKDTree(pts)
    opt = Adam(surface.parameters(), lr=lr)
    value = 0.0
    for step in range(steps):
        with ad.Tape():
            x = surface(uniform_sphere(n_samples, rng))
            _, nn_idx = tree.query(x.data)
            to_cloud = ((x - pts[nn_idx]) ** 2).sum(axis=1).mean()
            loss = to_cloud
            if symmetric:
                anchors = pts[rng.choice(len(pts), size=min(n_samples, len(pts)), replace=False)]
                _, back = cKDTree(x.data).query(anchors)
                loss = loss + ((ad.take(x, back) - anchors) ** 2).sum(axis=1).mean()
            ad.backward(loss)
        opt.step()
        value = loss.item()
        if step % 500 == 0:
            logger.debug("surface fit step %d chamfer %.6f", step, value)
    return value


def dump_eigenfunctions(
    prefix: str | Path, surface: NeuralSurface, eigs: EigenfunctionSet, *, height: int = 32, width: int = 64
) -> list[Path]:
    """Per-eigenfunction lat-long PGMs (min-max normalised) plus a JSON sidecar of the ranges."""

    lat = np.linspace(np.pi / 2, -np.pi / 2, height)
    lon = np.linspace(-np.pi, np.pi, width, endpoint=False)
    la, lo = np.meshgrid(lat, lon, indexing="ij")
    u = np.stack([np.cos(la) * np.cos(lo), np.cos(la) * np.sin(lo), np.sin(la)], axis=-1).reshape(-1, 3)
    with ad.no_grad():
        psi = eigs.embed(surface(u)).data.reshape(height, width, -1)
    prefix = Path(prefix)
    paths: list[Path] = []
    ranges = []
    for k in range(psi.shape[-1]):
        v = psi[..., k]
        lo_v, hi_v = float(v.min()), float(v.max())
        span = hi_v - lo_v if hi_v > lo_v else 1.0
        paths.append(write_pgm(prefix.with_name(f"{prefix.name}_psi{k + 1}.pgm"), (v - lo_v) / span, 256.0))
        ranges.append({"psi": k + 1, "min": lo_v, "max": hi_v})
    sidecar = prefix.with_name(prefix.name + "_psi.json")
    sidecar.write_text(json.dumps(ranges, indent=2))
    paths.append(sidecar)
    return paths
