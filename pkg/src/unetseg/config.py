"""Training configuration: a single JSON document with documented defaults."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

from .data import AugmentPolicy
from .errors import ConfigError, InvalidConfigError
from .losses import DICE_MODES, LossConfig
from .unet import UNetConfig, validate_depth


@dataclass
class DataConfig:
    train_manifest: Optional[str] = None
    val_manifest: Optional[str] = None
    data_dir: Optional[str] = None
    val_fraction: float = 0.2
    mask_threshold: float = 0.5


@dataclass
class OptimizerConfig:
    base_lr: float = 0.001
    factor: float = 0.75
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class Seeds:
    weights: int = 0
    split: int = 0
    shuffle: int = 0
    augment: int = 0


@dataclass
class AugmentConfig:
    enabled: bool = True
    hflip_prob: float = 0.5
    rotation: str = "quarter"
    max_angle: float = 15.0

    def policy(self, seed: int) -> Optional[AugmentPolicy]:
        if not self.enabled:
            return None
        return AugmentPolicy(self.hflip_prob, self.rotation, self.max_angle, seed)


@dataclass
class TrainConfig:
    data: DataConfig = field(default_factory=DataConfig)
    image_size: int = 256
    model: UNetConfig = field(default_factory=UNetConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    epochs: int = 50
    batch_size: int = 4
    seeds: Seeds = field(default_factory=Seeds)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    checkpoint_dir: str = "runs/unet"
    checkpoint_every: int = 1
    dice_mode: str = "standard"
    threshold: float = 0.5
    prefetch: bool = True

    def validate(self) -> "TrainConfig":
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.checkpoint_every < 1:
            raise ConfigError("checkpoint_every must be >= 1")
        if self.dice_mode not in DICE_MODES:
            raise ConfigError(f"dice_mode must be one of {DICE_MODES}")
        if not 0.0 < self.threshold < 1.0:
            raise ConfigError("threshold must be in (0, 1)")
        if self.optimizer.base_lr <= 0:
            raise ConfigError("optimizer.base_lr must be > 0")
        try:
            validate_depth(self.image_size, self.image_size, self.model.depth)
            self.augment.policy(0)
        except (InvalidConfigError, ValueError) as exc:
            raise ConfigError(str(exc)) from None
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        """Fill unset fields with defaults; unknown keys are an error."""
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        sections = {
            "data": DataConfig, "model": UNetConfig, "loss": LossConfig,
            "optimizer": OptimizerConfig, "seeds": Seeds, "augment": AugmentConfig,
        }
        known = {f.name for f in fields(cls)}
        kwargs = {}
        for key, value in d.items():
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}")
            if key in sections:
                kwargs[key] = _section(sections[key], key, value)
            else:
                kwargs[key] = value
        return cls(**kwargs).validate()


def _section(kind, key, value):
    if not isinstance(value, dict):
        raise ConfigError(f"config section {key!r} must be an object")
    allowed = {f.name for f in fields(kind)}
    for k in value:
        if k not in allowed:
            raise ConfigError(f"unknown key {key}.{k}")
    try:
        return kind(**value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{key}: {exc}") from None


def load_config(path) -> TrainConfig:
    """Read a JSON config; relative paths inside it resolve against its directory."""
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    cfg = TrainConfig.from_dict(raw)
    base = path.resolve().parent
    for attr in ("train_manifest", "val_manifest", "data_dir"):
        value = getattr(cfg.data, attr)
        if value is not None and not Path(value).is_absolute():
            setattr(cfg.data, attr, str(base / value))
    if not Path(cfg.checkpoint_dir).is_absolute():
        cfg.checkpoint_dir = str(base / cfg.checkpoint_dir)
    return cfg
