"""Dataclass configuration for the model, training loop, and synthetic data.

Configs serialize to/from plain JSON so runs are reproducible from a single
file. Validation happens once, at load, so downstream modules can assume a
consistent geometry.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

FUSION_MODES = ("cross_attention", "add", "concat", "none")
BRANCH_MODES = ("both", "image_only", "keypoint_only")
SAMPLE_TYPES = ("image_3d", "image_2d_only", "image_pseudo3d", "mocap")


class ConfigError(ValueError):
    pass


@dataclass
class BlockConfig:
    """Per-block layer counts and the branch-interaction flavor."""

    n_front: int = 0
    n_cross: int = 1
    n_back: int = 0
    n_blocks: int = 1
    fusion_mode: str = "cross_attention"

    def validate(self) -> None:
        if min(self.n_front, self.n_cross, self.n_back) < 0:
            raise ConfigError("block layer counts must be nonnegative")
        if self.n_blocks < 1:
            raise ConfigError("n_blocks must be >= 1")
        if self.fusion_mode not in FUSION_MODES:
            raise ConfigError(f"fusion_mode must be one of {FUSION_MODES}, got {self.fusion_mode!r}")


@dataclass
class LossWeights:
    heatmaps: float = 1.0
    vertex: float = 1.0
    joint: float = 1.0
    joint_reg: float = 1.0
    reproj: float = 1.0
    consistency: float = 1.0

    def validate(self) -> None:
        for f in dataclasses.fields(self):
            if getattr(self, f.name) < 0:
                raise ConfigError(f"loss weight {f.name} must be nonnegative")


@dataclass
class AugmentConfig:
    """Global-rotation and 2D jitter ranges for synthetic sample generation.

    Angles in degrees; shift in pixels; scale is a multiplicative factor.
    """

    roll_range: tuple[float, float] = (-30.0, 30.0)
    pitch_range: tuple[float, float] = (-30.0, 30.0)
    yaw_range: tuple[float, float] = (-60.0, 60.0)
    shift_range: tuple[float, float] = (-20.0, 20.0)
    scale_range: tuple[float, float] = (0.9, 1.1)

    def validate(self) -> None:
        for name in ("roll_range", "pitch_range", "yaw_range", "shift_range", "scale_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ConfigError(f"{name}: lower bound exceeds upper bound")


@dataclass
class DataSpec:
    """How many samples of each type a synthetic stream contains."""

    counts: dict[str, int] = field(default_factory=lambda: {"image_3d": 16})
    seed: int = 0
    body_scale: float = 40.0
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    def validate(self) -> None:
        for k, v in self.counts.items():
            if k not in SAMPLE_TYPES:
                raise ConfigError(f"unknown sample type {k!r}")
            if v < 0:
                raise ConfigError(f"negative count for sample type {k!r}")
        if self.body_scale <= 0:
            raise ConfigError("body_scale must be positive")
        self.augment.validate()


@dataclass
class ModelConfig:
    d_model: int = 64
    head_count: int = 4
    block: BlockConfig = field(default_factory=BlockConfig)
    image_h: int = 128
    image_w: int = 128
    keypoint_count: int = 17
    joint_count: int = 14
    coarse_vertices: int = 32
    full_vertices: int = 128
    gcn_depth: int = 2
    gcn_width: int = 64
    backbone_channels: tuple[int, ...] = (8, 16, 32, 64, 128)
    ensemble_lambda: float = 0.5
    branches: str = "both"
    use_switch_mlp: bool = True
    use_consistency: bool = True
    mocap_reproj: bool = True
    heatmap_threshold: float = 0.05
    heatmap_sigma: float = 2.0
    root_joint: int = 0
    # Conditioning constants: a fixed gain on the vertex/joint head outputs
    # (targets live at pixel scale) and a bias inside the camera softplus so
    # the initial projection scale starts near 1 / (image half extent).
    head_output_scale: float = 30.0
    camera_bias: float = -4.0
    loss_weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0

    @property
    def heatmap_h(self) -> int:
        return self.image_h // 4

    @property
    def heatmap_w(self) -> int:
        return self.image_w // 4

    @property
    def template_tokens(self) -> int:
        return self.coarse_vertices + self.joint_count

    @property
    def grid_tokens(self) -> int:
        return (self.image_h // 16) * (self.image_w // 16)

    @property
    def image_tokens(self) -> int:
        return self.template_tokens + self.grid_tokens

    @property
    def keypoint_tokens(self) -> int:
        return self.template_tokens + self.keypoint_count

    def validate(self) -> None:
        self.block.validate()
        self.loss_weights.validate()
        if self.d_model % self.head_count:
            raise ConfigError(f"d_model {self.d_model} not divisible by head_count {self.head_count}")
        if self.image_h % 32 or self.image_w % 32:
            raise ConfigError(f"image extent {self.image_h}x{self.image_w} must be divisible by 32")
        for name in ("d_model", "head_count", "keypoint_count", "joint_count",
                     "coarse_vertices", "full_vertices", "gcn_depth", "gcn_width"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.full_vertices < self.coarse_vertices:
            raise ConfigError("full_vertices must be >= coarse_vertices")
        if len(self.backbone_channels) != 5:
            raise ConfigError("backbone needs exactly five stage channel counts")
        if not 0.0 <= self.ensemble_lambda <= 1.0:
            raise ConfigError("ensemble_lambda must lie in [0, 1]")
        if self.branches not in BRANCH_MODES:
            raise ConfigError(f"branches must be one of {BRANCH_MODES}")
        if not 0 <= self.root_joint < self.joint_count:
            raise ConfigError("root_joint out of range")


@dataclass
class TrainConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 8
    steps: int = 100
    eval_every: int = 0
    log_every: int = 1

    def validate(self) -> None:
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("adam betas must lie in [0, 1)")
        if self.lr <= 0 or self.eps <= 0:
            raise ConfigError("lr and eps must be positive")
        if self.batch_size < 1 or self.steps < 0:
            raise ConfigError("batch_size must be >= 1 and steps >= 0")


@dataclass
class RunConfig:
    """Everything one training run needs: model, optimizer, data."""

    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    train_data: DataSpec = field(default_factory=DataSpec)
    eval_data: DataSpec = field(default_factory=lambda: DataSpec(counts={"image_3d": 8}, seed=7))

    def validate(self) -> None:
        self.model.validate()
        self.train.validate()
        self.train_data.validate()
        self.eval_data.validate()


def _to_jsonable(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_jsonable(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, tuple):
        return list(obj)
    if isinstance(obj, dict):
        return {k: _to_jsonable(v) for k, v in obj.items()}
    return obj


def _from_dict(cls, data: dict):
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in data:
            continue
        v = data[f.name]
        if dataclasses.is_dataclass(f.type) or f.type in ("BlockConfig", "LossWeights", "AugmentConfig",
                                                          "ModelConfig", "TrainConfig", "DataSpec"):
            sub = {"BlockConfig": BlockConfig, "LossWeights": LossWeights, "AugmentConfig": AugmentConfig,
                   "ModelConfig": ModelConfig, "TrainConfig": TrainConfig, "DataSpec": DataSpec}[f.type]
            kwargs[f.name] = _from_dict(sub, v)
        elif isinstance(v, list):
            kwargs[f.name] = tuple(v)
        else:
            kwargs[f.name] = v
    return cls(**kwargs)


def config_to_json(cfg: RunConfig) -> str:
    return json.dumps(_to_jsonable(cfg), indent=2, sort_keys=True)


def config_from_json(text: str) -> RunConfig:
    cfg = _from_dict(RunConfig, json.loads(text))
    cfg.validate()
    return cfg


def load_config(path: str) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return config_from_json(fh.read())


def small_toy() -> ModelConfig:
    """Default desk-scale model."""
    return ModelConfig()


def paper_shape() -> ModelConfig:
    """Full-size mesh resolution; used for shape assertions only."""
    return ModelConfig(coarse_vertices=431, full_vertices=6890)
