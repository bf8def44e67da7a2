"""Alternating field / pose optimisation, evaluation and run bookkeeping.

Training works in unit-cube coordinates (see lidar.SceneNormalization); metrics
and exported trajectories are converted back to scene units.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Adam, Tensor
from .checkpoint import load_tensors, save_tensors
from .cross_frame import Discriminator, DepthPair, make_pairs, multiscale_disc_loss, multiscale_gen_loss
from .errors import ConfigError, GeometryError, NumericalAbort
from .field import NeuralField, RenderOutput, dump_render, fusion_weight, range_loss
from .lidar import (
    PointCloud,
    RangeImage,
    SceneNormalization,
    fit_normalization,
    pixel_directions,
    project,
    unproject,
    voxel_downsample,
    write_pgm,
    write_trajectory,
)
from .metrics import ate, chamfer_distance, fscore, image_metrics, rpe, write_metrics_csv
from .pose_graph import PoseGraph, build_graph, graph_loss, write_graph
from .scene import build_scene, generate_scene, load_scene, perturb_poses
from .se3 import PoseParams, RigidTransform
from .settings import resolve_seed
from .spectral import EigenfunctionSet, NeuralSurface, dump_eigenfunctions, fit_surface, spectral_terms
from .types import ExperimentConfig, MetricReport, NoiseSpec, PhaseKind, Schedule

logger = logging.getLogger(__name__)

LOSS_COLUMNS = ["step", "kind", "loss", "range", "spectral", "gen", "disc", "graph", "lr"]


# ---------------------------------------------------------------- schedules


def lr_at(step: int, total: int, lr0: float, power: float = 0.9) -> float:
    """lr0 * (1 - step / total) ** power."""

    frac = min(max(step / max(total, 1), 0.0), 1.0)
    return lr0 * (1.0 - frac) ** power


@dataclass(frozen=True)
class Phase:
    kind: PhaseKind
    epochs: int
    steps: int
    start: int
    ratio: float = 0.0


def plan_phases(schedule: Schedule, field_epoch_steps: int, *, with_pose: bool = True) -> list[Phase]:
    """Expand the m1/m2 alternation into phases whose steps sum to ``total_iters``.

    Each round runs m1 field epochs and then m2 = round(m1 * ratio) pose epochs,
    the ratio falling linearly from ratio_start to ratio_end with training progress.
    """

    total = schedule.total_iters
    if not with_pose:
        return [Phase(PhaseKind.field, math.ceil(total / max(field_epoch_steps, 1)), total, 0)]
    phases: list[Phase] = []
    used = 0
    while used < total:
        steps = min(schedule.m1 * field_epoch_steps, total - used)
        phases.append(Phase(PhaseKind.field, schedule.m1, steps, used))
        used += steps
        if used >= total:
            break
        progress = used / total
        ratio = schedule.ratio_start + (schedule.ratio_end - schedule.ratio_start) * progress
        m2 = max(1, round(schedule.m1 * ratio))
        steps = min(m2 * schedule.pose_steps_per_epoch, total - used)
        phases.append(Phase(PhaseKind.pose, m2, steps, used, ratio))
        used += steps
    return phases


# ---------------------------------------------------------------- data


@dataclass
class SceneData:
    """Metric scans, images and poses plus the unit-cube normalisation used for training."""

    sensor: object
    scans: list[PointCloud]
    images: list[RangeImage]
    gt_poses: list[RigidTransform]
    init_poses: list[RigidTransform]
    norm: SceneNormalization
    train: list[int]
    test: list[int]

    @property
    def scale(self) -> float:
        return self.norm.scale

    def norm_image(self, k: int) -> RangeImage:
        img = self.images[k]
        return RangeImage(img.depth * self.scale, img.intensity, img.drop_mask)

    def norm_points(self, k: int) -> np.ndarray:
        return self.scans[k].points * self.scale


def split_frames(n: int, cfg: ExperimentConfig) -> tuple[list[int], list[int]]:
    test = [k for k in range(n) if cfg.eval.is_test(k)]
    train = [k for k in range(n) if k not in test]
    if len(train) < 2:
        raise ConfigError(f"need at least 2 training frames, got {len(train)} of {n}")
    return train, test


def assemble_data(
    cfg: ExperimentConfig,
    scans: Sequence[PointCloud],
    gt_poses: Sequence[RigidTransform],
    init_poses: Sequence[RigidTransform],
) -> SceneData:
    images = [project(c, cfg.sensor) for c in scans]
    world = [T.apply_points(c.points) for T, c in zip(init_poses, scans)]
    norm = fit_normalization(world)
    train, test = split_frames(len(scans), cfg)
    return SceneData(cfg.sensor, list(scans), images, list(gt_poses), list(init_poses), norm, train, test)


def prepare_data(cfg: ExperimentConfig, seed: int) -> SceneData:
    """Scans and ground truth from ``cfg.data_dir`` when set, else a freshly generated scene."""

    if cfg.data_dir is not None:
        scans, gt_poses = load_scene(cfg.data_dir)
        logger.info("loaded %d scans from %s", len(scans), cfg.data_dir)
    else:
        scans, gt_poses, _ = generate_scene(build_scene(cfg.scene, cfg.sensor, seed))
    noise = NoiseSpec(rot_sigma_deg=cfg.noise.rot_sigma_deg, trans_sigma_m=cfg.noise.trans_sigma_m, seed=cfg.noise.seed + seed)
    init = perturb_poses(gt_poses, noise) if cfg.switches.pose_free else list(gt_poses)
    return assemble_data(cfg, scans, gt_poses, init)


def match_clouds(data: SceneData, cfg: ExperimentConfig) -> list[np.ndarray]:
    """Voxel-downsampled, normalised sensor-frame points of each training frame."""

    out = []
    for k in data.train:
        pts = data.norm_points(k)
        out.append(pts[voxel_downsample(pts, cfg.graph.voxel, cfg.graph.max_points)])
    return out


# ---------------------------------------------------------------- model


@dataclass
class Model:
    field: NeuralField
    eigs: EigenfunctionSet
    surface: NeuralSurface | None
    disc: Discriminator
    poses: PoseParams

    def state(self, norm: SceneNormalization, train: Sequence[int], step: int) -> dict[str, np.ndarray]:
        out = self.field.state_dict("field.")
        out.update(self.eigs.state_dict("eigs."))
        out.update(self.disc.state_dict("disc."))
        if self.surface is not None:
            out.update(self.surface.state_dict("surface."))
            out["surface.center"] = self.surface.center
            out["surface.axes"] = self.surface.axes
        out["pose.xi"] = self.poses.as_array()
        out["pose.frames"] = np.asarray(train, dtype=np.float64)
        out["norm.scale"] = np.array([norm.scale])
        out["norm.center"] = norm.center
        out["meta.step"] = np.array([float(step)])
        return out


def build_model(cfg: ExperimentConfig, data: SceneData, seed: int) -> Model:
    rng = np.random.default_rng([seed, 0])
    eigs = EigenfunctionSet(rng, K=cfg.spectral.K, hidden=cfg.spectral.hidden)
    fld = NeuralField(
        cfg.grid, cfg.field, rng, eigenfunctions=eigs if cfg.switches.use_spectral else None, spectral_dim=cfg.spectral.K
    )
    disc = Discriminator(rng, base=cfg.adversarial.base_channels)
    init = [data.norm.pose_forward(data.init_poses[k]) for k in data.train]
    poses = PoseParams.from_transforms(init, trainable=cfg.switches.pose_free)
    return Model(fld, eigs, None, disc, poses)


def load_model(cfg: ExperimentConfig, data: SceneData, checkpoint: str | Path, seed: int) -> tuple[Model, int]:
    state = load_tensors(checkpoint)
    model = build_model(cfg, data, seed)
    model.field.load_state_dict(state, "field.")
    model.eigs.load_state_dict(state, "eigs.")
    model.disc.load_state_dict(state, "disc.")
    if "surface.center" in state:
        surface = NeuralSurface(np.random.default_rng(0), hidden=cfg.spectral.hidden)
        surface.center = state["surface.center"].copy()
        surface.axes = state["surface.axes"].copy()
        surface.load_state_dict(state, "surface.")
        model.surface = surface
    frames = state["pose.frames"].astype(np.int64).tolist()
    if frames != list(data.train):
        raise GeometryError(f"checkpoint trained on frames {frames}, data splits {data.train}")
    model.poses.set_array(state["pose.xi"])
    data.norm = SceneNormalization(float(state["norm.scale"][0]), state["norm.center"].copy())
    return model, int(state["meta.step"][0])


def pose_graph_at(model: Model, clouds: Sequence[np.ndarray], cfg: ExperimentConfig, step: int) -> PoseGraph:
    """Match hybrid features of the posed clouds under the thresholds scheduled for ``step``."""

    total = cfg.schedule.total_iters
    progress = step / total
    fusion = fusion_weight(step, total, cfg.schedule.ramp_frac)
    feats = []
    with ad.no_grad():
        for k, pts in enumerate(clouds):
            world = model.poses.transform(k).apply_points(pts)
            feats.append(model.field.hybrid_query(world, fusion).f_hyb.data)
    th = cfg.graph.thresholds
    return build_graph(clouds, feats, th.edge_threshold(progress), th.tau_d(progress))


# ---------------------------------------------------------------- trainer


@dataclass
class TrainResult:
    run_dir: Path
    checkpoint: Path
    report: MetricReport
    initial_ate: float
    final_ate: float
    graph_losses: list[float] = field(default_factory=list)


class Trainer:
    def __init__(self, cfg: ExperimentConfig, run_dir: str | Path, *, data: SceneData | None = None) -> None:
        self.cfg = cfg
        self.seed = resolve_seed(cfg.seed)
        self.run_dir = Path(run_dir)
        self.run_dir.mkdir(parents=True, exist_ok=True)
        self.data = data if data is not None else prepare_data(cfg, self.seed)
        self.model = build_model(cfg, self.data, self.seed)
        self.rng = np.random.default_rng([self.seed, 1])
        self.spectral_rng = np.random.default_rng([self.seed, 2])

        sw = cfg.switches
        self.field_opt = Adam(self.model.field.parameters(), lr=cfg.schedule.lr0)
        self.eig_opt = Adam(self.model.eigs.parameters(), lr=cfg.spectral.lr)
        self.disc_opt = Adam(self.model.disc.parameters(), lr=cfg.adversarial.lr)
        self.pose_opt = Adam(self.model.poses.trainable(), lr=cfg.schedule.pose_lr0)
        self.train_images = [self.data.norm_image(k) for k in self.data.train]
        self._depth = np.stack([img.depth for img in self.train_images])
        self._intensity = np.stack([img.intensity for img in self.train_images])
        self._drop = np.stack([img.drop_mask for img in self.train_images])
        self.gt_norm_poses = [self.data.norm.pose_forward(self.data.gt_poses[k]) for k in self.data.train]
        self.match_points = match_clouds(self.data, cfg)
        sensor = cfg.sensor
        self.pixels_per_frame = sensor.beams * sensor.width
        self.n_pixels = self.pixels_per_frame * len(self.data.train)
        self.field_epoch_steps = math.ceil(self.n_pixels / cfg.schedule.batch_rays)
        self.phases = plan_phases(cfg.schedule, self.field_epoch_steps, with_pose=sw.pose_free)
        self._order = np.zeros(0, dtype=np.int64)
        self._cursor = 0
        self._initial_loss: float | None = None
        self._over = 0
        self.last_good: Path | None = None
        self.graph_losses: list[float] = []
        self._loss_file = self.run_dir / "losses.csv"
        self._graph_file = self.run_dir / "graph.jsonl"

    # -- bookkeeping

    def _log_losses(self, rows: list[dict]) -> None:
        fresh = not self._loss_file.exists()
        with self._loss_file.open("a", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=LOSS_COLUMNS)
            if fresh:
                writer.writeheader()
            for row in rows:
                writer.writerow({k: (repr(float(v)) if isinstance(v, float) else v) for k, v in row.items()})

    def save_checkpoint(self, step: int, name: str = "last.nlf") -> Path:
        path = save_tensors(self.run_dir / name, self.model.state(self.data.norm, self.data.train, step))
        self.last_good = path
        return path

    def _guard(self, loss: float, step: int) -> None:
        if not math.isfinite(loss):
            raise NumericalAbort(
                f"non-finite loss at step {step}",
                checkpoint=str(self.last_good) if self.last_good else None,
            )
        if self._initial_loss is None:
            self._initial_loss = loss
            return
        if loss > self.cfg.schedule.divergence_factor * self._initial_loss:
            self._over += 1
            if self._over == 1:
                logger.warning("step %d: loss %.4g is above %gx its initial value", step, loss, self.cfg.schedule.divergence_factor)
            if self._over >= self.cfg.schedule.divergence_patience:
                raise NumericalAbort(
                    f"loss diverged: above {self.cfg.schedule.divergence_factor}x its initial value "
                    f"for {self._over} steps (step {step})",
                    checkpoint=str(self.last_good) if self.last_good else None,
                )
        else:
            self._over = 0

    # -- batches

    def _next_pixels(self, n: int) -> np.ndarray:
        out = []
        while n > 0:
            if self._cursor >= len(self._order):
                self._order = self.rng.permutation(self.n_pixels)
                self._cursor = 0
            take = self._order[self._cursor : self._cursor + n]
            self._cursor += len(take)
            n -= len(take)
            out.append(take)
        return np.concatenate(out)

    def _rays(self, flat: np.ndarray, differentiable: bool) -> tuple[Tensor, Tensor, np.ndarray, RangeImage]:
        sensor = self.cfg.sensor
        frame = flat // self.pixels_per_frame
        pix = flat % self.pixels_per_frame
        rows, cols = pix // sensor.width, pix % sensor.width
        local = pixel_directions(sensor, rows, cols)
        poses = self.model.poses
        if differentiable:
            Rt = [poses.tensors(k) for k in range(len(poses))]
            Rs = ad.take(ad.stack([R for R, _ in Rt], axis=0), frame)
            ts = ad.take(ad.stack([t for _, t in Rt], axis=0), frame)
            dirs = (Rs @ local.reshape(-1, 3, 1)).reshape(-1, 3)
            origins = ts
        else:
            T = poses.transforms()
            Rs = np.stack([T[k].R for k in range(len(T))])[frame]
            dirs = Tensor(np.einsum("bij,bj->bi", Rs, local))
            origins = Tensor(np.stack([T[k].t for k in range(len(T))])[frame])
        gt = RangeImage(
            self._depth[frame, rows, cols][None],
            self._intensity[frame, rows, cols][None],
            self._drop[frame, rows, cols][None],
        )
        return origins, dirs, frame, gt

    @staticmethod
    def _as_row(out: RenderOutput) -> RenderOutput:
        return RenderOutput(
            out.depth.reshape(1, -1), out.intensity.reshape(1, -1), out.drop.reshape(1, -1), out.opacity.reshape(1, -1)
        )

    # -- steps

    def _spectral_ready(self) -> bool:
        return self.cfg.switches.use_spectral and self.model.surface is not None and self.cfg.weights.spectral > 0.0

    def fit_surface(self, step: int) -> None:
        pts = np.concatenate(
            [self.model.poses.transform(k).apply_points(p) for k, p in enumerate(self.match_points)]
        )
        if self.model.surface is None:
            self.model.surface = NeuralSurface.from_points(pts, self.spectral_rng, hidden=self.cfg.spectral.hidden)
        sc = self.cfg.spectral
        value = fit_surface(
            self.model.surface,
            pts,
            steps=sc.fit_steps,
            n_samples=sc.fit_samples,
            lr=sc.fit_lr,
            rng=self.spectral_rng,
            symmetric=sc.fit_symmetric,
        )
        logger.info("surface fit at step %d: chamfer %.6f over %d points", step, value, len(pts))

    def field_step(self, step: int) -> dict:
        cfg = self.cfg
        sw, w = cfg.switches, cfg.weights
        total = cfg.schedule.total_iters
        lr = lr_at(step, total, cfg.schedule.lr0, cfg.schedule.lr_power)
        fusion = fusion_weight(step, total, cfg.schedule.ramp_frac) if sw.use_spectral else 0.0
        joint = sw.joint_pose_grad and sw.pose_free
        row = {"step": step, "kind": PhaseKind.field.value, "spectral": 0.0, "gen": 0.0, "disc": 0.0, "graph": 0.0, "lr": lr}
        use_spec = self._spectral_ready() and step % cfg.spectral.every == 0
        adv = (
            sw.use_cross_frame
            and w.consistency > 0.0
            and step >= cfg.adversarial.warmup_frac * total
            and step % cfg.adversarial.every == 0
        )
        fake: DepthPair | None = None
        real: DepthPair | None = None
        with ad.Tape():
            origins, dirs, _, gt = self._rays(self._next_pixels(cfg.schedule.batch_rays), joint)
            out = self.model.field.render_rays(origins, dirs, cfg.march, fusion, self.rng)
            rl = range_loss(self._as_row(out), gt, w)
            loss = rl
            row["range"] = rl.item()
            if use_spec:
                terms = spectral_terms(self.model.surface, self.model.eigs, cfg.spectral, self.spectral_rng)
                ramp = fusion_weight(step, total, cfg.schedule.ramp_frac)
                loss = loss + terms.total * (w.spectral * ramp)
                row["spectral"] = terms.total.item()
            if adv:
                i = int(self.rng.integers(0, len(self.data.train) - 1))
                real, fake = make_pairs(
                    i,
                    i + 1,
                    self.train_images,
                    self.model.poses,
                    self.gt_norm_poses,
                    self.model.field,
                    cfg.sensor,
                    cfg.march,
                    fusion=fusion,
                    column_stride=cfg.adversarial.column_stride,
                )
                g = multiscale_gen_loss(self.model.disc, fake)
                loss = loss + g * w.consistency
                row["gen"] = g.item()
            ad.backward(loss)
        row["loss"] = loss.item()
        self._guard(row["loss"], step)
        self.field_opt.step(lr)
        if use_spec:
            self.eig_opt.step(cfg.spectral.lr)
        if self.model.surface is not None:
            for p in self.model.surface.parameters():
                p.grad = None
        if joint:
            self.pose_opt.step(lr_at(step, total, cfg.schedule.pose_lr0, cfg.schedule.lr_power))
        else:
            self.pose_opt.zero_grad()
        self.eig_opt.zero_grad()
        if adv and real is not None and fake is not None:
            row["disc"] = self.disc_step(real, fake)
        return row

    def disc_step(self, real: DepthPair, fake: DepthPair) -> float:
        self.disc_opt.zero_grad()
        detached = DepthPair(Tensor(fake.channels.data), fake.label)
        with ad.Tape():
            loss = multiscale_disc_loss(self.model.disc, real, detached)
            ad.backward(loss)
        self.disc_opt.step()
        return loss.item()

    def rebuild_graph(self, step: int) -> PoseGraph:
        graph = pose_graph_at(self.model, self.match_points, self.cfg, step)
        write_graph(self._graph_file, graph)
        logger.info("step %d: pose graph with %d edges (%d loop)", step, len(graph), len(graph.loops))
        return graph

    def pose_step(self, step: int, graph: PoseGraph | None) -> dict:
        cfg = self.cfg
        total = cfg.schedule.total_iters
        lr = lr_at(step, total, cfg.schedule.pose_lr0, cfg.schedule.lr_power)
        row = {"step": step, "kind": PhaseKind.pose.value, "range": 0.0, "spectral": 0.0, "gen": 0.0, "disc": 0.0, "graph": 0.0, "lr": lr}
        with ad.Tape():
            if graph is not None:
                loss = graph_loss(graph, self.match_points, self.model.poses) * cfg.weights.graph
                row["graph"] = loss.item()
            else:
                fusion = fusion_weight(step, total, cfg.schedule.ramp_frac) if cfg.switches.use_spectral else 0.0
                origins, dirs, _, gt = self._rays(self._next_pixels(cfg.schedule.batch_rays), True)
                out = self.model.field.render_rays(origins, dirs, cfg.march, fusion)
                loss = range_loss(self._as_row(out), gt, cfg.weights)
                row["range"] = loss.item()
            if loss.requires_grad:
                ad.backward(loss)
        row["loss"] = loss.item()
        if not math.isfinite(row["loss"]):
            raise NumericalAbort(f"non-finite pose loss at step {step}", checkpoint=str(self.last_good) if self.last_good else None)
        if loss.requires_grad:
            self.pose_opt.step(lr)
        self.field_opt.zero_grad()
        if graph is not None:
            self.graph_losses.append(row["graph"])
        return row

    # -- run

    def pose_ate(self) -> float:
        est = [self.data.norm.pose_inverse(T) for T in self.model.poses.transforms()]
        gt = [self.data.gt_poses[k] for k in self.data.train]
        return ate(est, gt)

    def train(self) -> TrainResult:
        cfg = self.cfg
        (self.run_dir / "config.json").write_text(cfg.model_dump_json(indent=2))
        for stale in (self._loss_file, self._graph_file):
            stale.unlink(missing_ok=True)
        initial_ate = self.pose_ate()
        logger.info(
            "training %s: %d train / %d test frames, %d phases, initial ATE %.4f",
            cfg.name, len(self.data.train), len(self.data.test), len(self.phases), initial_ate,
        )
        self.save_checkpoint(0)
        if cfg.switches.use_spectral and cfg.weights.spectral > 0.0:
            self.fit_surface(0)
        step = 0
        for phase in self.phases:
            rows = []
            if phase.kind is PhaseKind.field:
                for _ in range(phase.steps):
                    if self._spectral_ready() and step > 0 and step % cfg.spectral.refit_every == 0:
                        self.fit_surface(step)
                    rows.append(self.field_step(step))
                    step += 1
                    if step % cfg.schedule.checkpoint_every == 0:
                        self.save_checkpoint(step)
            else:
                graph = self.rebuild_graph(step) if cfg.switches.use_pose_graph else None
                for _ in range(phase.steps):
                    rows.append(self.pose_step(step, graph))
                    step += 1
                    if step % cfg.schedule.checkpoint_every == 0:
                        self.save_checkpoint(step)
            self._log_losses(rows)
            logger.info(
                "phase %s x%d done at step %d: loss %.6f, lr %.2e",
                phase.kind.value, phase.epochs, step, rows[-1]["loss"] if rows else float("nan"), rows[-1]["lr"] if rows else 0.0,
            )
        ckpt = self.save_checkpoint(step)
        final_ate = self.pose_ate()
        write_trajectory(
            self.run_dir / "poses_est.txt", [self.data.norm.pose_inverse(T) for T in self.model.poses.transforms()]
        )
        report = evaluate(cfg, self.data, self.model, self.run_dir, self.seed)
        logger.info("finished: ATE %.4f -> %.4f", initial_ate, final_ate)
        return TrainResult(self.run_dir, ckpt, report, initial_ate, final_ate, list(self.graph_losses))


def train(cfg: ExperimentConfig, run_dir: str | Path, *, data: SceneData | None = None) -> TrainResult:
    return Trainer(cfg, run_dir, data=data).train()


# ---------------------------------------------------------------- evaluation


def optimize_test_pose(
    cfg: ExperimentConfig, model: Model, image: RangeImage, init: RigidTransform, seed: int
) -> RigidTransform:
    """Fit one held-out pose against the frozen field with the range loss."""

    params = PoseParams.from_transforms([init], freeze_first=False)
    if cfg.eval.test_pose_steps == 0:
        return params.transform(0)
    opt = Adam(params.trainable(), lr=cfg.eval.test_pose_lr)
    rng = np.random.default_rng([seed, 3])
    sensor = cfg.sensor
    n = sensor.beams * sensor.width
    fusion = 1.0 if cfg.switches.use_spectral else 0.0
    for _ in range(cfg.eval.test_pose_steps):
        flat = rng.choice(n, size=min(cfg.schedule.batch_rays, n), replace=False)
        rows, cols = flat // sensor.width, flat % sensor.width
        with ad.Tape():
            R, t = params.tensors(0)
            dirs = Tensor(pixel_directions(sensor, rows, cols)) @ R.T
            origins = ad.broadcast_to(t.reshape(1, 3), dirs.shape)
            out = model.field.render_rays(origins, dirs, cfg.march, fusion)
            gt = RangeImage(image.depth[rows, cols][None], image.intensity[rows, cols][None], image.drop_mask[rows, cols][None])
            loss = range_loss(Trainer._as_row(out), gt, cfg.weights)
            ad.backward(loss)
        opt.step()
        for p in model.field.parameters():
            p.grad = None
    return params.transform(0)


def evaluate_frame(
    cfg: ExperimentConfig, data: SceneData, model: Model, k: int, pose_norm: RigidTransform
) -> tuple[MetricReport, RangeImage]:
    fusion = 1.0 if cfg.switches.use_spectral else 0.0
    rendered = model.field.render_view(pose_norm, cfg.sensor, cfg.march, fusion)
    s = data.scale
    pred = RangeImage(rendered.depth / s, rendered.intensity, rendered.drop_mask)
    gt = data.images[k]
    depth = image_metrics(pred.depth, gt.depth, gt.valid, median_mode=cfg.eval.median_mode)
    inten = image_metrics(pred.intensity, gt.intensity, gt.valid, median_mode=cfg.eval.median_mode)
    pred_cloud = unproject(pred, cfg.sensor)
    if len(pred_cloud) and len(data.scans[k]):
        cd = chamfer_distance(pred_cloud, data.scans[k])
        fs = fscore(pred_cloud, data.scans[k], cfg.eval.fscore_thresh)
    else:
        cd, fs = float(cfg.sensor.max_range) ** 2, 0.0
    report = MetricReport(
        cd=cd,
        fscore=fs,
        depth_rmse=depth.rmse,
        depth_medae=depth.medae,
        depth_psnr=depth.psnr,
        depth_ssim=depth.ssim,
        int_rmse=inten.rmse,
        int_medae=inten.medae,
        int_psnr=inten.psnr,
        int_ssim=inten.ssim,
    )
    return report, pred


def _mean_reports(reports: Sequence[MetricReport]) -> MetricReport:
    keys = MetricReport.model_fields
    return MetricReport(**{k: float(np.mean([getattr(r, k) for r in reports])) for k in keys})


def evaluate(
    cfg: ExperimentConfig,
    data: SceneData,
    model: Model,
    out_dir: str | Path | None,
    seed: int,
    frames: Sequence[int] | None = None,
) -> MetricReport:
    """Held-out view metrics (averaged) plus ATE / RPE of the training trajectory, in scene units."""

    frames = list(data.test if frames is None else frames)
    if not frames:
        raise GeometryError("no frames to evaluate")
    missing = [k for k in frames if not 0 <= k < len(data.scans)]
    if missing:
        raise GeometryError(f"frames {missing} are not in the sequence of {len(data.scans)}")
    train_T = model.poses.transforms()
    reports = []
    for k in frames:
        if k in data.train:
            pose = train_T[data.train.index(k)]
        else:
            nearest = min(range(len(data.train)), key=lambda n: (abs(data.train[n] - k), data.train[n]))
            pose = optimize_test_pose(cfg, model, data.norm_image(k), train_T[nearest], seed)
        report, pred = evaluate_frame(cfg, data, model, k, pose)
        reports.append(report)
        if out_dir is not None:
            try:
                dump_render(
                    Path(out_dir) / "renders" / f"{k:06d}",
                    pred,
                    cfg.sensor,
                    {"frame": k, "held_out": k not in data.train, "scene_scale": data.scale},
                )
            except OSError:
                logger.exception("could not write render for frame %d", k)
    est = [data.norm.pose_inverse(T) for T in train_T]
    gt = [data.gt_poses[k] for k in data.train]
    rpe_r, rpe_t = rpe(est, gt)
    report = _mean_reports(reports).model_copy(update={"ate_m": ate(est, gt), "rpe_r_deg": rpe_r, "rpe_t_cm": rpe_t})
    if out_dir is not None:
        path = Path(out_dir) / "metrics.csv"
        path.unlink(missing_ok=True)
        write_metrics_csv(path, report)
        (Path(out_dir) / "metrics_frames.json").write_text(
            json.dumps({str(k): r.model_dump() for k, r in zip(frames, reports)}, indent=2, sort_keys=True)
        )
    return report


def eval_run(run_dir: str | Path, *, frames: Sequence[int] | None = None, data: SceneData | None = None) -> MetricReport:
    """Re-evaluate a finished run from its config.json and last checkpoint."""

    cfg, data, model, step, seed = _load_run(run_dir, data)
    run = Path(run_dir)
    logger.info("evaluating %s at step %d on frames %s", run, step, list(frames) if frames else data.test)
    return evaluate(cfg, data, model, run, seed, frames)


def _load_run(run_dir: str | Path, data: SceneData | None) -> tuple[ExperimentConfig, SceneData, Model, int, int]:
    run = Path(run_dir)
    cfg_path = run / "config.json"
    if not cfg_path.exists():
        raise ConfigError(f"no config.json in {run}")
    cfg = ExperimentConfig.model_validate_json(cfg_path.read_text())
    seed = resolve_seed(cfg.seed)
    data = data if data is not None else prepare_data(cfg, seed)
    model, step = load_model(cfg, data, run / "last.nlf", seed)
    return cfg, data, model, step, seed


def diagnose(
    run_dir: str | Path, out_dir: str | Path | None = None, *, pairs: bool = False, data: SceneData | None = None
) -> dict:
    """Dump the final pose graph, eigenfunction images and (optionally) real/fake depth pairs."""

    cfg, data, model, step, _ = _load_run(run_dir, data)
    out = Path(out_dir) if out_dir is not None else Path(run_dir) / "diag"
    out.mkdir(parents=True, exist_ok=True)
    graph = pose_graph_at(model, match_clouds(data, cfg), cfg, step)
    write_graph(out / "graph.jsonl", graph, append=False)
    files = [out / "graph.jsonl"]
    if model.surface is not None:
        files += dump_eigenfunctions(out / "eig", model.surface, model.eigs)
    if pairs:
        images = [data.norm_image(k) for k in data.train]
        gt = [data.norm.pose_forward(data.gt_poses[k]) for k in data.train]
        scale = 256.0 / (cfg.sensor.max_range * data.scale)
        fusion = 1.0 if cfg.switches.use_spectral else 0.0
        with ad.no_grad():
            for i in range(len(data.train) - 1):
                real, fake = make_pairs(i, i + 1, images, model.poses, gt, model.field, cfg.sensor, cfg.march, fusion=fusion)
                side = np.concatenate([real.channels.data[0], fake.channels.data[0]], axis=1)
                files.append(write_pgm(out / f"pair_{data.train[i]:06d}_{data.train[i + 1]:06d}.pgm", side, scale))
    summary = {
        "step": step,
        "edges": len(graph),
        "loops": len(graph.loops),
        "connected": graph.is_connected(),
        "files": [str(f) for f in files],
    }
    logger.info("diagnostics for %s: %d edges (%d loop) written to %s", run_dir, len(graph), len(graph.loops), out)
    return summary
