from __future__ import annotations

import math
from enum import Enum
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, model_validator


class EdgeKind(str, Enum):
    sequential = "sequential"
    loop = "loop"


class MatchStage(str, Enum):
    coarse = "coarse"
    fine = "fine"


class PairLabel(str, Enum):
    real = "real"
    fake = "fake"


class PhaseKind(str, Enum):
    field = "field"
    pose = "pose"


class _Config(BaseModel):
    model_config = ConfigDict(extra="forbid")


class SensorModel(_Config):
    beams: int = Field(ge=1)
    vfov_deg: float = Field(gt=0.0)
    # Elevation of the top beam (row 0).
    vfov_offset_deg: float = 2.0
    width: int = Field(ge=1)
    max_range: float = Field(default=80.0, gt=0.0)

    @property
    def height(self) -> int:
        return self.beams


SENSOR_PRESETS: dict[str, SensorModel] = {
    "kitti360": SensorModel(beams=64, vfov_deg=26.4, vfov_offset_deg=2.0, width=1024, max_range=80.0),
    "nuscenes": SensorModel(beams=32, vfov_deg=40.0, vfov_offset_deg=10.0, width=1024, max_range=80.0),
    "desk": SensorModel(beams=32, vfov_deg=26.4, vfov_offset_deg=2.0, width=256, max_range=40.0),
}


class HashGridConfig(_Config):
    levels: int = Field(default=20, ge=1)
    features_per_level: int = Field(default=2, ge=1)
    table_size_log2: int = Field(default=19, ge=4, le=24)
    base_resolution: int = Field(default=16, ge=1)
    finest_resolution: int = Field(default=2048, ge=1)
    init_scale: float = Field(default=1e-4, ge=0.0)

    @property
    def output_dim(self) -> int:
        return self.levels * self.features_per_level

    @property
    def growth_factor(self) -> float:
        if self.levels == 1:
            return 1.0
        return math.exp(math.log(self.finest_resolution / self.base_resolution) / (self.levels - 1))

    def resolution(self, level: int) -> int:
        return int(math.floor(self.base_resolution * self.growth_factor**level))


class RayMarchConfig(_Config):
    samples_per_ray: int = Field(default=768, ge=2)
    near: float = Field(default=0.0, ge=0.0)
    far: float = Field(default=1.0, gt=0.0)
    stratified: bool = False
    # Rays rendered per chunk in full-view rendering.
    chunk: int = Field(default=2048, ge=1)

    @model_validator(mode="after")
    def _near_before_far(self) -> RayMarchConfig:
        if not self.near < self.far:
            raise ValueError(f"near ({self.near}) must be < far ({self.far})")
        return self


class FieldConfig(_Config):
    hidden: int = Field(default=64, ge=1)
    feature_dim: int = Field(default=20, ge=1)
    view_bands: int = Field(default=12, ge=0)
    # Added to the raw density so an untrained field is close to empty.
    density_bias: float = -5.0
    drop_threshold: float = Field(default=0.5, ge=0.0, le=1.0)


class SpectralConfig(_Config):
    M: int = Field(default=4096, ge=1)
    K: int = Field(default=8, ge=1)
    lambda_n: float = Field(default=0.1, ge=0.0)
    lambda_o: float = Field(default=10.0, ge=0.0)
    hidden: int = Field(default=64, ge=1)
    pilot: int = Field(default=1024, ge=1)
    fit_steps: int = Field(default=2000, ge=0)
    fit_samples: int = Field(default=1024, ge=1)
    fit_lr: float = Field(default=1e-3, gt=0.0)
    # Also pull the surface toward every cloud point, not only samples onto the cloud.
    fit_symmetric: bool = True
    refit_every: int = Field(default=5000, ge=1)
    # Field steps between spectral-loss evaluations.
    every: int = Field(default=1, ge=1)
    lr: float = Field(default=1e-3, gt=0.0)


class LossWeights(_Config):
    lambda_d: float = Field(default=20.0, ge=0.0)
    lambda_i: float = Field(default=0.5, ge=0.0)
    lambda_p: float = Field(default=1.0, ge=0.0)
    spectral: float = Field(default=1.0, ge=0.0)
    consistency: float = Field(default=1.0, ge=0.0)
    graph: float = Field(default=1.0, ge=0.0)
    # When set, these replace spectral.lambda_n / spectral.lambda_o.
    lambda_n: float | None = Field(default=None, ge=0.0)
    lambda_o: float | None = Field(default=None, ge=0.0)


class Schedule(_Config):
    total_iters: int = Field(default=60000, ge=1)
    batch_rays: int = Field(default=4096, ge=1)
    lr0: float = Field(default=0.01, ge=0.0)
    lr_power: float = Field(default=0.9, ge=0.0)
    pose_lr0: float = Field(default=0.01, ge=0.0)
    m1: int = Field(default=1, ge=1)
    ratio_start: float = Field(default=10.0, ge=1.0)
    ratio_end: float = Field(default=1.0, ge=1.0)
    pose_steps_per_epoch: int = Field(default=20, ge=1)
    ramp_frac: float = Field(default=0.5, gt=0.0, le=1.0)
    checkpoint_every: int = Field(default=1000, ge=1)
    divergence_factor: float = Field(default=10.0, gt=1.0)
    divergence_patience: int = Field(default=500, ge=1)

    @model_validator(mode="after")
    def _ratio_decays(self) -> Schedule:
        if self.ratio_end > self.ratio_start:
            raise ValueError("ratio_end must not exceed ratio_start")
        return self


class ThresholdSchedule(_Config):
    edge_start: float = Field(default=0.5, ge=-1.0, le=1.0)
    edge_end: float = Field(default=0.9, ge=-1.0, le=1.0)
    tau_start: float = Field(default=0.1, ge=0.0)
    tau_end: float = Field(default=0.2, ge=0.0)

    @model_validator(mode="after")
    def _monotone(self) -> ThresholdSchedule:
        if self.edge_end < self.edge_start or self.tau_end < self.tau_start:
            raise ValueError("threshold schedule must be non-decreasing")
        return self

    def edge_threshold(self, progress: float) -> float:
        p = min(max(progress, 0.0), 1.0)
        return self.edge_start + (self.edge_end - self.edge_start) * p

    def tau_d(self, progress: float) -> float:
        p = min(max(progress, 0.0), 1.0)
        return self.tau_start + (self.tau_end - self.tau_start) * p


class PoseGraphConfig(_Config):
    voxel: float = Field(default=0.02, gt=0.0)
    max_points: int = Field(default=512, ge=2)
    thresholds: ThresholdSchedule = Field(default_factory=ThresholdSchedule)


class NoiseSpec(_Config):
    rot_sigma_deg: float = Field(default=20.0, ge=0.0)
    trans_sigma_m: float = Field(default=3.0, ge=0.0)
    seed: int = 0


class SceneConfig(_Config):
    layout: Literal["desk", "plane"] = "desk"
    n_frames: int = Field(default=8, ge=2)
    # Distance travelled between consecutive frames (scene units).
    step: float = Field(default=1.0, gt=0.0)
    # Heading change per frame (degrees); keeps the trajectory off a straight line.
    turn_deg: float = 4.0
    sensor_height: float = 1.7


class AdversarialConfig(_Config):
    lr: float = Field(default=1e-4, gt=0.0)
    base_channels: int = Field(default=64, ge=1)
    warmup_frac: float = Field(default=0.2, ge=0.0, le=1.0)
    # Field steps between adversarial updates.
    every: int = Field(default=1, ge=1)
    column_stride: int = Field(default=1, ge=1)


class Switches(_Config):
    use_spectral: bool = True
    use_pose_graph: bool = True
    use_cross_frame: bool = True
    joint_pose_grad: bool = False
    pose_free: bool = True


class EvalConfig(_Config):
    test_every: int = Field(default=8, ge=2)
    test_offset: int = Field(default=4, ge=0)
    test_pose_steps: int = Field(default=200, ge=0)
    test_pose_lr: float = Field(default=1e-3, gt=0.0)
    fscore_thresh: float = Field(default=0.05, gt=0.0)
    median_mode: Literal["midpoint", "lower"] = "midpoint"

    def is_test(self, frame: int) -> bool:
        return frame % self.test_every == self.test_offset


class ExperimentConfig(_Config):
    name: str = "run"
    preset: str = "desk"
    seed: int = 0
    data_dir: str | None = None
    sensor: SensorModel = Field(default_factory=lambda: SENSOR_PRESETS["desk"].model_copy())
    scene: SceneConfig = Field(default_factory=SceneConfig)
    noise: NoiseSpec = Field(default_factory=NoiseSpec)
    grid: HashGridConfig = Field(default_factory=HashGridConfig)
    march: RayMarchConfig = Field(default_factory=RayMarchConfig)
    field: FieldConfig = Field(default_factory=FieldConfig)
    spectral: SpectralConfig = Field(default_factory=SpectralConfig)
    weights: LossWeights = Field(default_factory=LossWeights)
    schedule: Schedule = Field(default_factory=Schedule)
    graph: PoseGraphConfig = Field(default_factory=PoseGraphConfig)
    adversarial: AdversarialConfig = Field(default_factory=AdversarialConfig)
    switches: Switches = Field(default_factory=Switches)
    eval: EvalConfig = Field(default_factory=EvalConfig)

    @model_validator(mode="after")
    def _spectral_weights(self) -> ExperimentConfig:
        update = {k: v for k in ("lambda_n", "lambda_o") if (v := getattr(self.weights, k)) is not None}
        if update:
            self.spectral = self.spectral.model_copy(update=update)
        return self


def desk_preset() -> ExperimentConfig:
    return ExperimentConfig(
        name="desk",
        preset="desk",
        sensor=SENSOR_PRESETS["desk"].model_copy(),
        noise=NoiseSpec(rot_sigma_deg=5.0, trans_sigma_m=0.3),
        grid=HashGridConfig(table_size_log2=16),
        march=RayMarchConfig(samples_per_ray=64, near=0.0, far=1.0),
        spectral=SpectralConfig(M=1024, fit_steps=200, fit_samples=512, refit_every=1000, every=5),
        schedule=Schedule(total_iters=3000, batch_rays=1024, checkpoint_every=500),
        adversarial=AdversarialConfig(base_channels=16, every=5, column_stride=2),
    )


def full_preset() -> ExperimentConfig:
    return ExperimentConfig(
        name="full",
        preset="full",
        sensor=SENSOR_PRESETS["kitti360"].model_copy(),
        scene=SceneConfig(n_frames=24, step=2.0, sensor_height=1.7),
        noise=NoiseSpec(rot_sigma_deg=20.0, trans_sigma_m=3.0),
        march=RayMarchConfig(samples_per_ray=768, near=0.0, far=1.0),
    )


PRESETS = {"desk": desk_preset, "full": full_preset}


class MetricReport(BaseModel):
    cd: float = 0.0
    fscore: float = Field(default=0.0, ge=0.0, le=1.0)
    depth_rmse: float = Field(default=0.0, ge=0.0)
    depth_medae: float = Field(default=0.0, ge=0.0)
    depth_psnr: float = 0.0
    depth_ssim: float = Field(default=0.0, ge=-1.0, le=1.0)
    int_rmse: float = Field(default=0.0, ge=0.0)
    int_medae: float = Field(default=0.0, ge=0.0)
    int_psnr: float = 0.0
    int_ssim: float = Field(default=0.0, ge=-1.0, le=1.0)
    ate_m: float = Field(default=0.0, ge=0.0)
    rpe_r_deg: float = Field(default=0.0, ge=0.0)
    rpe_t_cm: float = Field(default=0.0, ge=0.0)

    @classmethod
    def csv_header(cls) -> str:
        return ",".join(cls.model_fields)

    def csv_row(self) -> str:
        return ",".join(repr(float(getattr(self, k))) for k in type(self).model_fields)

    def table(self) -> str:
        width = max(len(k) for k in type(self).model_fields)
        return "\n".join(f"{k:<{width}}  {getattr(self, k):12.6f}" for k in type(self).model_fields)
