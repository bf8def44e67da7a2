import sys
import tempfile
from pathlib import Path

import numpy as np

ROOT = Path(__file__).resolve().parents[1]
if str(ROOT) not in sys.path:
    sys.path.insert(0, str(ROOT))

from nlf import autodiff as ad  # noqa: E402
from nlf.autodiff import Tensor, gradcheck  # noqa: E402
from nlf.field import (  # noqa: E402
    HashGrid,
    NeuralField,
    RenderOutput,
    composite,
    dump_render,
    fusion_weight,
    hash_encode,
    range_loss,
    sample_depths,
)
from nlf.lidar import RangeImage, Ray  # noqa: E402
from nlf.se3 import PoseParams, RigidTransform  # noqa: E402
from nlf.spectral import EigenfunctionSet  # noqa: E402
from nlf.types import FieldConfig, HashGridConfig, LossWeights, RayMarchConfig, SensorModel  # noqa: E402

SMALL_GRID = HashGridConfig(levels=2, features_per_level=2, table_size_log2=6, base_resolution=2, finest_resolution=8)
MARCH = RayMarchConfig(samples_per_ray=16)
SENSOR = SensorModel(beams=4, vfov_deg=20.0, vfov_offset_deg=5.0, width=16, max_range=40.0)


def _field(seed: int = 0, **field_kw) -> NeuralField:
    return NeuralField(SMALL_GRID, FieldConfig(hidden=16, feature_dim=8, view_bands=2, **field_kw), np.random.default_rng(seed))


def test_composite_hand_case():
    sigma = Tensor([[np.log(2.0), np.log(4.0)]])
    weights, opacity = composite(sigma, 1.0)
    assert np.allclose(weights.data, [[0.5, 0.375]], atol=1e-15)
    depth = (weights.data * np.array([[1.0, 2.0]])).sum()
    assert abs(depth - 1.25) < 1e-15
    assert abs(opacity.item() - 0.875) < 1e-15


def test_composite_telescopes():
    rng = np.random.default_rng(0)
    for _ in range(100):
        sigma = rng.exponential(3.0, size=(1, 40))
        delta = rng.uniform(0.01, 0.1)
        w, opacity = composite(Tensor(sigma), delta)
        assert np.all(w.data >= 0.0)
        assert abs(opacity.item() - (1.0 - np.exp(-np.sum(sigma) * delta))) < 1e-12
        bumped = sigma.copy()
        bumped[0, rng.integers(40)] += 1.0
        assert composite(Tensor(bumped), delta)[1].item() >= opacity.item()


def test_sample_depths_span_near_far():
    z, delta = sample_depths(RayMarchConfig(samples_per_ray=5, near=0.2, far=1.0), 3)
    assert z.shape == (3, 5)
    assert np.allclose(z[0], [0.2, 0.4, 0.6, 0.8, 1.0]) and abs(delta - 0.2) < 1e-15


def test_hash_grid_vertex_lookup():
    grid = HashGrid(SMALL_GRID, np.random.default_rng(1))
    out = hash_encode(np.zeros(3), grid)
    assert np.array_equal(out.data, np.concatenate([t.data[0] for t in grid.tables]))
    a = grid(Tensor(np.array([[0.3, 0.7, 0.1]]))).data
    b = grid(Tensor(np.array([[0.3, 0.7, 0.1]]))).data
    assert np.array_equal(a, b)
    assert grid.dense == [True, False]


def test_hash_grid_gradient():
    rng = np.random.default_rng(2)
    grid = HashGrid(SMALL_GRID.model_copy(update={"init_scale": 0.5}), rng)
    x = rng.uniform(size=(6, 3))
    w = rng.normal(size=(6, grid.output_dim))
    assert gradcheck(lambda: (grid(Tensor(x)) * w).sum(), grid.parameters()) < 1e-4


def test_hash_encode_is_affine_along_a_finest_cell_edge():
    grid = HashGrid(SMALL_GRID.model_copy(update={"init_scale": 0.5}), np.random.default_rng(7))
    coarse, fine = grid.resolutions
    # First finest-level edge that stays inside one coarse cell.
    k = next(k for k in range(1, fine) if int(k * coarse / fine) == int((k + 1) * coarse / fine - 1e-9))
    step = 1.0 / fine
    a = np.array([k * step, 0.4, 0.6])
    b = a + np.array([step, 0.0, 0.0])
    for t in (0.3, 0.5, 0.9):
        mid = (1.0 - t) * a + t * b
        ea, eb, em = (hash_encode(p, grid).data for p in (a, b, mid))
        assert np.allclose(em, (1.0 - t) * ea + t * eb, atol=1e-12)


def test_range_loss_end_to_end_gradient():
    grid_cfg = SMALL_GRID.model_copy(update={"init_scale": 0.5})
    field = NeuralField(grid_cfg, FieldConfig(hidden=8, feature_dim=4, view_bands=2, density_bias=1.0), np.random.default_rng(8))
    poses = PoseParams(np.array([[0.5, 0.5, 0.5, 0.1, -0.05, 0.2]]), freeze_first=False)
    march = RayMarchConfig(samples_per_ray=12, near=0.05, far=0.3)
    rng = np.random.default_rng(9)
    local = rng.normal(size=(4, 3))
    local /= np.linalg.norm(local, axis=1, keepdims=True)
    gt = RangeImage(np.full((1, 4), 5.0), rng.uniform(size=(1, 4)), np.array([[False, True, False, False]]))

    def loss() -> Tensor:
        R, t = poses.tensors(0)
        dirs = (R @ Tensor(local.T)).T
        origins = ad.broadcast_to(t.reshape(1, 3), (4, 3))
        out = field.render_rays(origins, dirs, march, 0.0)
        row = RenderOutput(out.depth.reshape(1, -1), out.intensity.reshape(1, -1), out.drop.reshape(1, -1), out.opacity.reshape(1, -1))
        return range_loss(row, gt, LossWeights())

    params = poses.trainable() + field.trunk.parameters() + field.intensity_head.parameters() + field.drop_head.parameters()
    assert len(poses.trainable()) == 1
    assert gradcheck(loss, params) < 1e-3


def test_hybrid_query_fusion_blocks():
    rng = np.random.default_rng(3)
    eigs = EigenfunctionSet(rng, K=8, hidden=16)
    field = NeuralField(SMALL_GRID, FieldConfig(hidden=16, feature_dim=8, view_bands=2), rng, eigenfunctions=eigs)
    x = np.array([0.4, 0.5, 0.6])
    spe = eigs.embed(x.reshape(1, 3)).data.reshape(-1)
    geo_dim = SMALL_GRID.output_dim
    with ad.no_grad():
        assert np.all(field.hybrid_query(x, 0.0).f_hyb.data[geo_dim:] == 0.0)
        assert np.allclose(field.hybrid_query(x, 1.0).f_hyb.data[geo_dim:], spe)
        assert np.allclose(field.hybrid_query(x, 0.5).f_hyb.data[geo_dim:], 0.5 * spe)
    names = [name for name, _ in field.named_parameters()]
    assert names and not any(name.startswith("eigenfunctions.") for name in names)


def test_transparent_field_renders_nothing():
    field = _field(density_bias=-1000.0)
    ray = Ray(np.array([0.5, 0.5, 0.5]), np.array([1.0, 0.0, 0.0]), (0, 0))
    depth, _, _, opacity = field.render_ray(ray, MARCH, 0.0)
    assert depth == 0.0 and opacity == 0.0


def test_weights_bounded_for_random_field():
    field = _field(seed=4, density_bias=2.0)
    rng = np.random.default_rng(4)
    dirs = rng.normal(size=(32, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    with ad.no_grad():
        out = field.render_rays(np.full((32, 3), 0.5), dirs, MARCH, 0.0)
    assert np.all(out.weights.data >= 0.0)
    assert np.all(out.opacity.data <= 1.0 + 1e-12)


def test_untrained_view_is_near_empty_and_deterministic():
    field = _field(seed=5)
    pose = RigidTransform(np.eye(3), [0.5, 0.5, 0.5])
    raw_a = field.render_view_raw(pose, SENSOR, MARCH, 0.0)
    raw_b = field.render_view_raw(pose, SENSOR, MARCH, 0.0)
    assert raw_a.opacity.max() < 0.1
    assert np.array_equal(raw_a.depth, raw_b.depth) and np.array_equal(raw_a.drop, raw_b.drop)


def _image(depth, intensity=None, drop=None) -> RangeImage:
    depth = np.asarray(depth, dtype=np.float64)
    return RangeImage(
        depth,
        np.zeros_like(depth) if intensity is None else intensity,
        np.zeros(depth.shape, dtype=bool) if drop is None else drop,
    )


def _pred(img: RangeImage) -> RenderOutput:
    return RenderOutput(
        Tensor(img.depth), Tensor(img.intensity), Tensor(img.drop_mask.astype(np.float64)), Tensor(np.ones(img.depth.shape))
    )


def test_range_loss_values():
    weights = LossWeights()
    gt = _image([[1.0, 2.0], [3.0, 4.0]], intensity=np.full((2, 2), 0.3))
    assert range_loss(_pred(gt), gt, weights).item() == 0.0
    single = _image([[1.0]])
    off = _pred(_image([[1.1]]))
    assert abs(range_loss(off, single, weights).item() - 2.0) < 1e-12


def test_range_loss_is_non_negative():
    rng = np.random.default_rng(6)
    for _ in range(20):
        gt = _image(rng.uniform(size=(3, 5)), rng.uniform(size=(3, 5)), rng.uniform(size=(3, 5)) < 0.3)
        pred = RenderOutput(
            Tensor(rng.uniform(size=(3, 5))), Tensor(rng.uniform(size=(3, 5))), Tensor(rng.uniform(size=(3, 5))), Tensor(np.ones((3, 5)))
        )
        assert range_loss(pred, gt, LossWeights()).item() >= 0.0


def test_fusion_weight_ramp():
    assert fusion_weight(0, 100) == 0.0
    assert fusion_weight(25, 100) == 0.5
    assert fusion_weight(50, 100) == 1.0 and fusion_weight(90, 100) == 1.0


def test_dump_render_writes_sidecar():
    img = _image(np.full((4, 16), 10.0))
    with tempfile.TemporaryDirectory() as tmp:
        paths = dump_render(Path(tmp) / "frame", img, SENSOR, {"frame": 3})
        assert all(p.exists() for p in paths)
        assert paths[-1].suffix == ".json"


def _run() -> None:
    for name, fn in sorted(globals().items()):
        if name.startswith("test_") and callable(fn):
            fn()
            print(f"ok  {name}")


if __name__ == "__main__":
    _run()
