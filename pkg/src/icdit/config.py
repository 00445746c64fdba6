"""Strict JSON run configuration; unknown keys are rejected loudly."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .backbone import CONDITION_KINDS
from .errors import ConfigError

#: drop-set names exposed to users; "caption" aliases the text stream
DROP_CHOICES = ("caption", "layout", "embedding")
_DROP_TO_KIND = {"caption": "text", "layout": "layout",
                 "embedding": "embedding"}


@dataclass
class LatentConfig:
    channels: int = 4
    h: int = 8
    w: int = 8


@dataclass
class ModelConfig:
    depth: int = 2
    d_model: int = 32
    n_heads: int = 4
    patch_size: int = 2
    latent: LatentConfig = field(default_factory=LatentConfig)


@dataclass
class DiffusionConfig:
    T: int = 200
    beta_start: float = 1e-4
    beta_end: float = 0.05


@dataclass
class TrainConfig:
    steps: int = 1000
    batch_size: int = 8
    lr: float = 1e-3
    clip_norm: float = 1.0


@dataclass
class DataConfig:
    n_train: int = 256
    n_eval: int = 32
    image_size: int = 32


@dataclass
class AblationConfig:
    drop: list = field(default_factory=list)


@dataclass
class PathsConfig:
    out_dir: str = "out"
    dataset_dir: str = "dataset"


@dataclass
class Config:
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def __post_init__(self):
        counts = {
            "model.depth": self.model.depth,
            "model.d_model": self.model.d_model,
            "model.n_heads": self.model.n_heads,
            "model.patch_size": self.model.patch_size,
            "model.latent.channels": self.model.latent.channels,
            "model.latent.h": self.model.latent.h,
            "model.latent.w": self.model.latent.w,
            "diffusion.T": self.diffusion.T,
            "train.steps": self.train.steps + 1,  # steps=0 is allowed
            "train.batch_size": self.train.batch_size,
            "data.n_train": self.data.n_train,
            "data.n_eval": self.data.n_eval,
            "data.image_size": self.data.image_size,
        }
        for name, value in counts.items():
            if value <= 0:
                raise ConfigError(f"{name} must be positive, got {value}")
        seen = set()
        for item in self.ablation.drop:
            if item not in DROP_CHOICES:
                raise ConfigError(
                    f"ablation.drop entry {item!r} not in {DROP_CHOICES}")
            if item in seen:
                raise ConfigError(f"duplicate ablation.drop entry {item!r}")
            seen.add(item)

    @property
    def latent_shape(self):
        lat = self.model.latent
        return (lat.channels, lat.h, lat.w)

    @property
    def drop_kinds(self):
        """Drop set translated to condition-stream kind names."""
        kinds = tuple(_DROP_TO_KIND[d] for d in self.ablation.drop)
        assert all(k in CONDITION_KINDS for k in kinds)
        return kinds

    def to_dict(self):
        return asdict(self)


_SECTIONS = {
    "model": (ModelConfig, {"latent": LatentConfig}),
    "diffusion": (DiffusionConfig, {}),
    "train": (TrainConfig, {}),
    "data": (DataConfig, {}),
    "ablation": (AblationConfig, {}),
    "paths": (PathsConfig, {}),
}


def _build(cls, obj, nested, where):
    if not isinstance(obj, dict):
        raise ConfigError(f"{where} must be an object, got {type(obj).__name__}")
    known = set(cls.__dataclass_fields__)
    unknown = set(obj) - known
    if unknown:
        raise ConfigError(
            f"unknown config key(s) {sorted(unknown)} in {where} "
            f"(known: {sorted(known)})")
    kwargs = dict(obj)
    for key, sub_cls in nested.items():
        if key in kwargs:
            kwargs[key] = _build(sub_cls, kwargs[key], {}, f"{where}.{key}")
    return cls(**kwargs)


def config_from_dict(obj):
    if not isinstance(obj, dict):
        raise ConfigError("config root must be a JSON object")
    unknown = set(obj) - ({"seed"} | set(_SECTIONS))
    if unknown:
        raise ConfigError(f"unknown top-level config key(s) {sorted(unknown)}")
    kwargs = {}
    if "seed" in obj:
        if not isinstance(obj["seed"], int):
            raise ConfigError(f"seed must be an integer, got {obj['seed']!r}")
        kwargs["seed"] = obj["seed"]
    for name, (cls, nested) in _SECTIONS.items():
        if name in obj:
            kwargs[name] = _build(cls, obj[name], nested, name)
    return Config(**kwargs)


def load_config(path):
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return config_from_dict(obj)
