"""Run configuration: one JSON document validated up front, with
`desk` (runnable on a laptop CPU) and `paper_fidelity` (the published
hyperparameters, impractical to train here) presets."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .augment import AugmentConfig, CropSpec
from .errors import ConfigError, DataError
from .objective import DistillConfig, HeadConfig
from .optim import OptimConfig, ScheduleConfig
from .synthetic import GeneratorConfig
from .vit import ViTConfig

PRESETS = ("desk", "paper_fidelity")


@dataclass(frozen=True)
class EvalConfig:
    k_grid: tuple[int, ...] = (1, 3, 5, 7, 9, 15)
    distance: str = "cosine"
    folds: int = 5
    pooling: str = "cls"

    def validate(self) -> None:
        if not self.k_grid or any(k < 1 for k in self.k_grid):
            raise ConfigError("eval.k_grid must be non-empty positive ints")
        if self.distance not in ("cosine", "euclidean"):
            raise ConfigError("eval.distance must be cosine or euclidean")
        if self.folds < 2:
            raise ConfigError("eval.folds must be >= 2")
        if self.pooling not in ("cls", "mean_patch"):
            raise ConfigError("eval.pooling must be cls or mean_patch")


@dataclass(frozen=True)
class FinetuneConfig:
    head: str = "linear"  # "linear" | "transformer"
    steps: int = 300
    batch_size: int = 16
    lr: float = 1e-4
    weight_decay: float = 0.001
    augment: bool = True

    def validate(self) -> None:
        if self.head not in ("linear", "transformer"):
            raise ConfigError("finetune.head must be linear or transformer")
        if self.steps < 0:
            raise ConfigError("finetune.steps must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("finetune.batch_size must be >= 1")
        if self.lr <= 0:
            raise ConfigError("finetune.lr must be > 0")
        if self.weight_decay < 0:
            raise ConfigError("finetune.weight_decay must be >= 0")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 8
    checkpoint_interval: int = 500
    freeze_final_layer_steps: int | None = None  # None -> schedule warmup steps

    def validate(self) -> None:
        if self.batch_size < 1:
            raise ConfigError("train.batch_size must be >= 1")
        if self.checkpoint_interval < 1:
            raise ConfigError("train.checkpoint_interval must be >= 1")
        if self.freeze_final_layer_steps is not None \
                and self.freeze_final_layer_steps < 0:
            raise ConfigError("train.freeze_final_layer_steps must be >= 0")


@dataclass
class RunConfig:
    model: ViTConfig = field(default_factory=ViTConfig)
    head: HeadConfig = field(default_factory=HeadConfig)
    distill: DistillConfig = field(default_factory=DistillConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: GeneratorConfig = field(default_factory=GeneratorConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    seed: int = 0

    def validate(self) -> "RunConfig":
        self.model.validate()
        self.head.validate()
        self.distill.validate()
        self.augment.validate()
        self.schedule.validate()
        self.optim.validate()
        self.train.validate()
        self.data.validate()
        self.eval.validate()
        self.finetune.validate()
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be a 64-bit unsigned integer")
        if self.head.embed_dim != self.model.embed_dim:
            raise ConfigError(
                "head.embed_dim must equal model.embed_dim "
                f"({self.head.embed_dim} != {self.model.embed_dim})"
            )
        if self.augment.global_crop.output_size != self.model.image_size_global:
            raise ConfigError(
                "augment.global_crop.output_size must equal model.image_size_global"
            )
        if self.augment.local_crop.output_size != self.model.image_size_local:
            raise ConfigError(
                "augment.local_crop.output_size must equal model.image_size_local"
            )
        return self

    @property
    def freeze_steps(self) -> int:
        if self.train.freeze_final_layer_steps is not None:
            return self.train.freeze_final_layer_steps
        return self.schedule.warmup_steps


# -- json round trip --------------------------------------------------------


def _to_jsonable(obj):
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return {f.name: _to_jsonable(getattr(obj, f.name))
                for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [_to_jsonable(v) for v in obj]
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    return obj


def config_to_dict(cfg: RunConfig) -> dict:
    return _to_jsonable(cfg)


def _build_dataclass(cls, data: dict, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(fields)
    if unknown:
        raise ConfigError(f"{path}.{sorted(unknown)[0]}: unknown key")
    kwargs = {}
    for name, value in data.items():
        f = fields[name]
        sub = _NESTED.get((cls, name))
        if sub is not None:
            kwargs[name] = _build_dataclass(sub, value, f"{path}.{name}")
        elif _TUPLE_FIELDS.get((cls, name)):
            if not isinstance(value, (list, tuple)):
                raise ConfigError(f"{path}.{name}: expected a list")
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


_NESTED = {
    (RunConfig, "model"): ViTConfig,
    (RunConfig, "head"): HeadConfig,
    (RunConfig, "distill"): DistillConfig,
    (RunConfig, "augment"): AugmentConfig,
    (RunConfig, "schedule"): ScheduleConfig,
    (RunConfig, "optim"): OptimConfig,
    (RunConfig, "train"): TrainConfig,
    (RunConfig, "data"): GeneratorConfig,
    (RunConfig, "eval"): EvalConfig,
    (RunConfig, "finetune"): FinetuneConfig,
    (AugmentConfig, "global_crop"): CropSpec,
    (AugmentConfig, "local_crop"): CropSpec,
}

_TUPLE_FIELDS = {
    (CropSpec, "area_range"): True,
    (GeneratorConfig, "organ_count_range"): True,
    (EvalConfig, "k_grid"): True,
}


def config_from_dict(data: dict) -> RunConfig:
    cfg = _build_dataclass(RunConfig, data, "config")
    cfg.validate()
    return cfg


def load_config(source) -> RunConfig:
    """Load a RunConfig from a preset name or a JSON file path."""
    if isinstance(source, RunConfig):
        return source.validate()
    text = str(source)
    if text in PRESETS:
        return preset(text)
    path = Path(text)
    if not path.is_file():
        raise DataError(f"config file not found: {path}")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    return config_from_dict(data)


def config_hash(cfg: RunConfig) -> str:
    canonical = json.dumps(config_to_dict(cfg), sort_keys=True,
                           separators=(",", ":"))
    return hashlib.sha256(canonical.encode("ascii")).hexdigest()


# -- presets ------------------------------------------------------------------


def preset(name: str) -> RunConfig:
    if name == "desk":
        return RunConfig().validate()
    if name == "paper_fidelity":
        # the published recipe: ViT-S/14, 224/98 crops, K=16384, batch 192,
        # lr 5e-2 over 80k/320k/1M steps, wd 0.04, DropPath 0.1, flip 0.1
        return RunConfig(
            model=ViTConfig(image_size_global=224, image_size_local=98,
                            patch_size=14, embed_dim=384, depth=12,
                            num_heads=6, mlp_ratio=4.0, drop_path_rate=0.1),
            head=HeadConfig(embed_dim=384, hidden_dim=2048,
                            bottleneck_dim=256, num_prototypes=16_384),
            distill=DistillConfig(),
            augment=AugmentConfig(
                global_crop=CropSpec((0.25, 1.0), 224, 1),
                local_crop=CropSpec((0.05, 0.25), 98, 5),
                flip_prob=0.1,
            ),
            schedule=ScheduleConfig(total_steps=1_400_000, warmup_steps=80_000,
                                    constant_steps=320_000, peak_lr=5e-2,
                                    final_lr=1e-4),
            optim=OptimConfig(weight_decay=0.04),
            train=TrainConfig(batch_size=192, checkpoint_interval=10_000,
                              freeze_final_layer_steps=80_000),
            data=GeneratorConfig(image_size=512),
            eval=EvalConfig(),
            finetune=FinetuneConfig(steps=20_000, batch_size=512, lr=5e-6,
                                    weight_decay=0.001),
        ).validate()
    raise ConfigError(f"unknown preset {name!r}; choose from {PRESETS}")
