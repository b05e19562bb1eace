"""Versioned configuration: nested dataclasses loaded from a strict JSON file.

Every key must be present and no unknown keys are accepted; errors name the
dotted key path.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    def __init__(self, message: str, path: str = ""):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


@dataclass
class DataConfig:
    image_size: int = 32
    shapes: list = field(default_factory=lambda: ["ellipse", "triangle", "blob"])
    textures: list = field(default_factory=lambda: ["flat", "stripes", "noise"])
    camo_level_range: list = field(default_factory=lambda: [0.0, 1.0])
    max_depth_offset: float = 0.3
    splits: dict = field(default_factory=lambda: {"train": 0.8, "val": 0.1, "test": 0.1})


@dataclass
class ModelConfig:
    dim: int = 64
    channels: int = 32
    heads: int = 4
    max_objects: int = 8
    prototypes: int = 8
    gcn_rounds: int = 2
    depth_patch: int = 4
    reference_patch: int = 8
    text_length: int = 12
    text_buckets: int = 1024
    use_dlcg: bool = True
    use_ama: bool = True


@dataclass
class DiffusionConfig:
    num_steps: int = 200
    sample_steps: int = 50


@dataclass
class TrainConfig:
    steps: int = 200
    batch_size: int = 16
    lr: float = 2e-3
    lambda1: float = 1.0
    lambda2: float = 1.0
    depth_timestep: int = 50
    grad_clip: float = 1.0
    ema_decay: float = 0.995
    seed: int = 0


@dataclass
class AnnotationConfig:
    mask_threshold: float = 0.5
    env_color_strength: float = 0.5


@dataclass
class Config:
    schema_version: int = SCHEMA_VERSION
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    annotation: AnnotationConfig = field(default_factory=AnnotationConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def hash(self) -> str:
        return config_hash(self)


def config_hash(cfg: Config) -> str:
    canon = json.dumps(cfg.to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:16]


def _check_value(value, default, path):
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    else:
        ok = isinstance(value, type(default))
    if not ok:
        raise ConfigError(f"expected {type(default).__name__}, got {type(value).__name__}", path)
    return value


def _build(cls, doc, path):
    if not isinstance(doc, dict):
        raise ConfigError("expected an object", path or "<root>")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    for key in doc:
        if key not in fields:
            raise ConfigError("unknown key", f"{path}.{key}" if path else key)
    proto = cls()
    kwargs = {}
    for name in fields:
        sub = f"{path}.{name}" if path else name
        if name not in doc:
            raise ConfigError("missing key", sub)
        default = getattr(proto, name)
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), doc[name], sub)
        else:
            kwargs[name] = _check_value(doc[name], default, sub)
    return cls(**kwargs)


def validate(cfg: Config) -> Config:
    if cfg.schema_version != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version {cfg.schema_version}", "schema_version")
    d = cfg.data
    if d.image_size <= 0 or d.image_size % 8:
        raise ConfigError("must be a positive multiple of 8", "data.image_size")
    if not d.shapes:
        raise ConfigError("shape set is empty", "data.shapes")
    if not d.textures:
        raise ConfigError("texture set is empty", "data.textures")
    lo_hi = d.camo_level_range
    if len(lo_hi) != 2 or not 0 <= lo_hi[0] <= lo_hi[1] <= 1:
        raise ConfigError("need [lo, hi] with 0 <= lo <= hi <= 1", "data.camo_level_range")
    if set(d.splits) != {"train", "val", "test"} or abs(sum(d.splits.values()) - 1) > 1e-9:
        raise ConfigError("train/val/test fractions summing to 1 required", "data.splits")
    for name in ("lambda1", "lambda2"):
        if getattr(cfg.train, name) < 0:
            raise ConfigError("must be non-negative", f"train.{name}")
    if not 0 <= cfg.train.ema_decay < 1:
        raise ConfigError("must lie in [0, 1)", "train.ema_decay")
    if not 0 <= cfg.train.depth_timestep < cfg.diffusion.num_steps:
        raise ConfigError("must lie in [0, diffusion.num_steps)", "train.depth_timestep")
    if not 1 <= cfg.diffusion.sample_steps <= cfg.diffusion.num_steps:
        raise ConfigError("must lie in [1, num_steps]", "diffusion.sample_steps")
    return cfg


def config_from_dict(doc: dict) -> Config:
    return validate(_build(Config, doc, ""))


def load_config(path) -> Config:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc.strerror or exc}", str(path)) from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed JSON: {exc}", str(path)) from exc
    return config_from_dict(doc)


def save_config(cfg: Config, path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2) + "\n", encoding="utf-8")
