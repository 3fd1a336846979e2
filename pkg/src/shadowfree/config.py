"""Run configuration, flat ``key = value`` config files and seeding."""
from __future__ import annotations

import dataclasses
import random
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Tuple

import numpy as np
import torch


class ConfigError(ValueError):
    """Invalid or unparseable configuration (CLI exit code 2)."""


class DataError(ValueError):
    """Dataset problem: missing partner, bad image, size mismatch (exit code 3)."""


class NumericError(RuntimeError):
    """Non-finite loss or failed numeric self-check (exit code 4)."""


@dataclass
class ModelConfig:
    base_channels: int = 32
    blocks_per_level: List[int] = field(default_factory=lambda: [2, 2, 2])
    refiner_levels: int = 3
    refiner_channels: int = 32
    refiner_blocks: int = 2
    ffa_heads: int = 1
    ffa_variant: str = "matrix"  # matrix | elementwise
    enable_unet_branch: bool = True
    enable_dwtffc_branch: bool = True
    enable_refiner: bool = True
    refiner_zero_init: bool = True
    disc_channels: int = 32

    def validate(self) -> None:
        if not (self.enable_unet_branch or self.enable_dwtffc_branch):
            raise ConfigError(
                "enable_unet_branch/enable_dwtffc_branch: at least one removal branch must be enabled")
        if len(self.blocks_per_level) != 3:
            raise ConfigError("blocks_per_level: expected exactly 3 entries")
        for name in ("base_channels", "refiner_levels", "refiner_channels", "refiner_blocks",
                     "ffa_heads", "disc_channels"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name}: must be >= 1")
        if any(b < 1 for b in self.blocks_per_level):
            raise ConfigError("blocks_per_level: all counts must be >= 1")
        if self.base_channels % 2:
            raise ConfigError("base_channels: must be even (the FFC block splits channels in half)")
        if self.refiner_channels % self.ffa_heads:
            raise ConfigError("ffa_heads: must divide refiner_channels")
        if self.ffa_variant not in ("matrix", "elementwise"):
            raise ConfigError("ffa_variant: expected 'matrix' or 'elementwise'")

    @property
    def pad_multiple(self) -> int:
        return max(16, 2 ** (self.refiner_levels - 1) if self.enable_refiner else 1)


@dataclass
class LossWeights:
    alpha: float = 0.2
    beta: float = 0.01
    gamma: float = 0.0005

    def validate(self) -> None:
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ConfigError(f"{f.name}: loss weights must be nonnegative")


@dataclass
class StageSchedule:
    stage1_steps: int = 1500
    stage2_steps: int = 500
    lr1_start: float = 1e-4
    lr1_end: float = 6.25e-6
    lr2: float = 1e-5
    batch_size: int = 2
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    stage2_joint: bool = True
    clip_norm: float = 1.0  # 0 disables

    def validate(self) -> None:
        for name in ("stage1_steps", "stage2_steps", "batch_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name}: must be >= 1")
        if not (self.lr1_start > 0 and self.lr1_end > 0 and self.lr2 > 0):
            raise ConfigError("lr1_start/lr1_end/lr2: learning rates must be > 0")
        if not self.lr1_end < self.lr1_start:
            raise ConfigError("lr1_end: must be smaller than lr1_start")
        for name in ("adam_beta1", "adam_beta2"):
            if not 0 < getattr(self, name) < 1:
                raise ConfigError(f"{name}: must lie in (0, 1)")
        if self.clip_norm < 0:
            raise ConfigError("clip_norm: must be >= 0")


@dataclass
class AugmentSpec:
    crop_size: int = 384
    rotations: List[int] = field(default_factory=lambda: [0, 90, 180, 270])
    hflip: bool = True
    vflip: bool = True

    def validate(self) -> None:
        if self.crop_size < 1:
            raise ConfigError("crop_size: must be >= 1")
        if not self.rotations or any(r not in (0, 90, 180, 270) for r in self.rotations):
            raise ConfigError("rotations: must be a nonempty subset of 0,90,180,270")


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    schedule: StageSchedule = field(default_factory=StageSchedule)
    augment: AugmentSpec = field(default_factory=AugmentSpec)
    seed: int = 0
    ssim_mode: str = "rgb"  # rgb | luma

    def validate(self) -> "RunConfig":
        self.model.validate()
        self.loss.validate()
        self.schedule.validate()
        self.augment.validate()
        if not 0 <= self.seed < 2 ** 64:
            raise ConfigError("seed: must be an unsigned 64-bit integer")
        if self.ssim_mode not in ("rgb", "luma"):
            raise ConfigError("ssim_mode: expected 'rgb' or 'luma'")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        return cls(
            model=ModelConfig(**d["model"]),
            loss=LossWeights(**d["loss"]),
            schedule=StageSchedule(**d["schedule"]),
            augment=AugmentSpec(**d["augment"]),
            seed=d["seed"],
            ssim_mode=d["ssim_mode"],
        ).validate()


_SECTIONS = ("model", "loss", "schedule", "augment")
_TOP_LEVEL = ("seed", "ssim_mode")


def _key_index() -> Dict[str, Tuple[Optional[str], dataclasses.Field]]:
    index = {}
    defaults = RunConfig()
    for section in _SECTIONS:
        for f in fields(getattr(defaults, section)):
            index[f.name] = (section, f)
    for f in fields(RunConfig):
        if f.name in _TOP_LEVEL:
            index[f.name] = (None, f)
    return index


_KEYS = _key_index()


def _parse_value(key: str, raw: str, default):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, list):
            return [int(v) for v in raw.replace("[", "").replace("]", "").split(",") if v.strip()]
        return raw
    except ValueError:
        raise ConfigError(f"{key}: cannot parse value {raw!r}") from None


def apply_overrides(cfg: RunConfig, items: Iterable[Tuple[str, str]]) -> RunConfig:
    """Apply ``(key, raw_value)`` pairs in place; unknown keys are rejected."""
    for key, raw in items:
        if key not in _KEYS:
            raise ConfigError(f"{key}: unknown config key")
        section, _ = _KEYS[key]
        target = cfg if section is None else getattr(cfg, section)
        setattr(target, key, _parse_value(key, raw, getattr(target, key)))
    return cfg


def parse_config_text(text: str, source: str = "<string>") -> List[Tuple[str, str]]:
    items = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        items.append((key, value))
    return items


def load_config(path=None, overrides: Iterable[str] = ()) -> RunConfig:
    """Load a config file (or defaults when ``path`` is None) plus ``key=value`` overrides."""
    cfg = RunConfig()
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        apply_overrides(cfg, parse_config_text(path.read_text(), str(path)))
    pairs = []
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r}: expected key=value")
        k, v = item.split("=", 1)
        pairs.append((k.strip(), v))
    apply_overrides(cfg, pairs)
    return cfg.validate()


def dump_config(cfg: RunConfig) -> str:
    lines = []
    for key, (section, _) in _KEYS.items():
        value = getattr(cfg if section is None else getattr(cfg, section), key)
        if isinstance(value, bool):
            value = str(value).lower()
        elif isinstance(value, list):
            value = ",".join(str(v) for v in value)
        elif isinstance(value, float):
            value = repr(value)
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


def seed_all(seed: int) -> None:
    """Reset every global RNG used for init; data draws are keyed on the seed separately."""
    random.seed(seed)
    np.random.seed(seed % 2 ** 32)
    torch.manual_seed(seed)


def draw_rng(seed: int, *position: int) -> np.random.Generator:
    """Generator that depends only on the run seed and the draw's structural position."""
    return np.random.default_rng([seed, *position])
