"""Run configuration: nested dataclasses loaded from / dumped to YAML.

Unknown keys are rejected. A file may start from a named ``preset``
(``kitti`` or ``toy``) and override any subset of keys.
"""
from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .evaluation import EvalConfig
from .geometry import RangeSpec
from .head import DEFAULT_ANCHORS, AnchorClass, LossWeights
from .model import ModelSpec
from .neck import NeckPlan
from .preprocess import AugmentParams, GridSpec, VoxelSpec
from .projection import BackbonePlan
from .train import OptimSettings
from .voxel_branch import StagePlan


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    source: str = "synthetic"          # "synthetic" or "kitti"
    root: str = ""
    cache_dir: str = "cache"
    synthetic_frames: int = 8
    synthetic_seed: int = 0
    classes: tuple = ("Car", "Cyclist")

    def __post_init__(self):
        if self.source not in ("synthetic", "kitti"):
            raise ConfigError(f"data.source must be 'synthetic' or 'kitti', got {self.source!r}")
        self.classes = tuple(self.classes)


@dataclass
class VoxelConfig:
    size: tuple = (0.1, 0.1, 0.125)
    max_voxels: int = 16000
    max_points: int = 12


@dataclass
class TrainConfig:
    steps: int = 500
    augment: bool = False
    order: str = "cycle"               # "cycle" or "shuffle"
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.steps < 0:
            raise ConfigError("train.steps must be >= 0")
        if self.order not in ("cycle", "shuffle"):
            raise ConfigError(f"train.order must be 'cycle' or 'shuffle', got {self.order!r}")


@dataclass
class EvalSettings:
    score_threshold: float = 0.3
    nms_threshold: float = 0.01
    iou_thresholds: dict = field(default_factory=lambda: {"Car": 0.7, "Cyclist": 0.5})


SECTIONS = {
    "data": DataConfig, "range": RangeSpec, "voxel": VoxelConfig, "augment": AugmentParams,
    "stages": StagePlan, "backbone": BackbonePlan, "neck": NeckPlan, "loss": LossWeights,
    "optim": OptimSettings, "train": TrainConfig, "eval": EvalSettings,
}


@dataclass
class RunConfig:
    seed: int = 0
    bev_cell: float = 0.1
    data: DataConfig = field(default_factory=DataConfig)
    range: RangeSpec = field(default_factory=lambda: RangeSpec(0.0, 60.8, -30.4, 30.4, -3.0, 1.0))
    voxel: VoxelConfig = field(default_factory=VoxelConfig)
    augment: AugmentParams = field(default_factory=AugmentParams)
    stages: StagePlan = field(default_factory=StagePlan)
    backbone: BackbonePlan = field(default_factory=BackbonePlan)
    neck: NeckPlan = field(default_factory=NeckPlan)
    anchors: tuple = DEFAULT_ANCHORS
    loss: LossWeights = field(default_factory=LossWeights)
    optim: OptimSettings = field(default_factory=OptimSettings)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalSettings = field(default_factory=EvalSettings)

    # ------------------------------------------------------------ derived objects
    def grid(self) -> GridSpec:
        return GridSpec.from_cell(self.range, self.bev_cell)

    def voxel_spec(self) -> VoxelSpec:
        return VoxelSpec(self.range, tuple(self.voxel.size), self.voxel.max_voxels, self.voxel.max_points)

    def model_spec(self) -> ModelSpec:
        return ModelSpec(self.grid(), self.voxel_spec(), self.stages, self.backbone, self.neck, tuple(self.anchors))

    def eval_config(self) -> EvalConfig:
        return EvalConfig(iou_thresholds=dict(self.eval.iou_thresholds))

    def cache_key(self) -> str:
        """Digest of everything that shapes preprocessed frames."""
        d = to_dict(self)
        relevant = {k: d[k] for k in ("seed", "bev_cell", "range", "voxel", "data")}
        return hashlib.sha256(yaml.safe_dump(relevant, sort_keys=True).encode()).hexdigest()[:16]


def kitti_preset() -> RunConfig:
    return RunConfig()


def toy_preset() -> RunConfig:
    """Small grid and narrow widths for single-core overfit runs (128x128 BEV, 32x32 head)."""
    w = 16
    return RunConfig(
        bev_cell=0.2,
        range=RangeSpec(0.0, 25.6, -12.8, 12.8, -3.0, 1.0),
        voxel=VoxelConfig(size=(0.2, 0.2, 0.125), max_voxels=8000, max_points=12),
        stages=StagePlan(channels=(w,) * 5, bev_channels=(w,) * 4),
        backbone=BackbonePlan(channels=(w,) * 5),
        neck=NeckPlan(out_channels=32),
    )


PRESETS = {"kitti": kitti_preset, "toy": toy_preset}


# --------------------------------------------------------------------------- (de)serialization

def _plain(v):
    if isinstance(v, (tuple, list)):
        return [_plain(x) for x in v]
    if isinstance(v, dict):
        return {str(k): _plain(x) for k, x in v.items()}
    return v


def to_dict(cfg: RunConfig) -> dict:
    out = {}
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        if f.name == "anchors":
            out[f.name] = [_plain(dataclasses.asdict(a)) for a in v]
        elif dataclasses.is_dataclass(v):
            out[f.name] = _plain(dataclasses.asdict(v))
        else:
            out[f.name] = _plain(v)
    return out


def _tupled(v):
    if isinstance(v, list):
        return tuple(_tupled(x) for x in v)
    if isinstance(v, dict):
        return {k: _tupled(x) for k, x in v.items()}
    return v


def _build(cls, data, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(data).__name__}")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    try:
        return cls(**{k: _tupled(v) for k, v in data.items()})
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k not in ("iou_thresholds", "samples_per_class"):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def from_dict(data: dict) -> RunConfig:
    data = dict(data or {})
    preset = data.pop("preset", None)
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r} (choose from {', '.join(PRESETS)})")
        data = _merge(to_dict(PRESETS[preset]()), data)
    top = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = sorted(set(data) - top)
    if unknown:
        raise ConfigError(f"config: unknown key(s) {', '.join(unknown)}")
    kwargs = {}
    for k, v in data.items():
        if k in SECTIONS:
            kwargs[k] = _build(SECTIONS[k], v, k)
        elif k == "anchors":
            if not isinstance(v, list) or not v:
                raise ConfigError("anchors: expected a non-empty list")
            kwargs[k] = tuple(_build(AnchorClass, a, f"anchors[{i}]") for i, a in enumerate(v))
        else:
            kwargs[k] = v
    try:
        cfg = RunConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    try:
        cfg.model_spec().check()
    except ValueError as exc:
        raise ConfigError(f"inconsistent geometry: {exc}") from exc
    return cfg


def load_config(path) -> RunConfig:
    text = Path(path).read_text()
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from exc
    return from_dict(data or {})


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(to_dict(cfg), sort_keys=False)
