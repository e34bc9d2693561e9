"""Model and schedule configuration with named presets."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields
from typing import Tuple

from .errors import ConfigError

STAGE_STRIDES = (4, 8, 16, 32)


@dataclass(frozen=True)
class ModelConfig:
    input_size: int = 128
    in_channels: int = 2
    patch_size: int = 4
    stage_channels: Tuple[int, ...] = (16, 32, 64, 128)
    stage_heads: Tuple[int, ...] = (2, 2, 2, 2)
    stage_depths: Tuple[int, ...] = (1, 1, 2, 1)
    window_sizes: Tuple[int, ...] = (8, 8, 8, 4)
    decoder_depth: int = 2
    decoder_dim: int = 64
    decoder_heads: int = 4
    mlp_ratio: float = 4.0
    mask_unit: int = 32
    label_count: int = 43

    def __post_init__(self):
        for name in ("stage_channels", "stage_heads", "stage_depths", "window_sizes"):
            value = tuple(int(v) for v in getattr(self, name))
            if len(value) != 4:
                raise ConfigError(f"{name} needs four stages, got {value}")
            object.__setattr__(self, name, value)
        self.validate()

    def validate(self) -> None:
        if self.patch_size != 4:
            raise ConfigError("patch_size must be 4 (stage strides 4, 8, 16, 32)")
        if self.input_size % 32:
            raise ConfigError(f"input_size {self.input_size} not divisible by 32")
        for i, (c, h) in enumerate(zip(self.stage_channels, self.stage_heads)):
            if c % h:
                raise ConfigError(f"stage {i + 1}: channels {c} not divisible by heads {h}")
        for i, g in enumerate(self.stage_grids):
            w = self.effective_window(i)
            if g % w:
                raise ConfigError(f"stage {i + 1}: token grid {g} not divisible by window {w}")
        if self.decoder_dim % self.decoder_heads:
            raise ConfigError("decoder_dim not divisible by decoder_heads")
        if self.mask_unit % STAGE_STRIDES[-1] or self.input_size % self.mask_unit:
            raise ConfigError(
                f"mask_unit {self.mask_unit} must be a multiple of 32 and divide input_size {self.input_size}"
            )
        if self.label_count < 1:
            raise ConfigError("label_count must be positive")

    @property
    def stage_grids(self) -> Tuple[int, ...]:
        return tuple(self.input_size // s for s in STAGE_STRIDES)

    def effective_window(self, stage: int) -> int:
        # a window larger than the token grid collapses to the whole grid
        return min(self.window_sizes[stage], self.stage_grids[stage])

    @property
    def mask_grid(self) -> int:
        return self.input_size // self.mask_unit

    def to_json(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_json(cls, doc: dict) -> "ModelConfig":
        unknown = set(doc) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown model config keys {sorted(unknown)}")
        return cls(**doc)

    def fingerprint(self) -> bytes:
        """32-byte SHA-256 of the canonical JSON form."""
        return hashlib.sha256(json.dumps(self.to_json(), sort_keys=True).encode()).digest()

    def replace(self, **changes) -> "ModelConfig":
        return ModelConfig.from_json({**self.to_json(), **changes})


PRESETS = {
    "desk": ModelConfig(),
    "paper": ModelConfig(
        stage_channels=(128, 256, 512, 1024),
        stage_heads=(4, 8, 16, 32),
        stage_depths=(2, 2, 18, 2),
        window_sizes=(8, 8, 8, 4),
        decoder_depth=8,
        decoder_dim=512,
        decoder_heads=16,
    ),
    # gradient-check scale
    "tiny": ModelConfig(input_size=64, stage_channels=(8, 16, 32, 64)),
}


def preset(name: str, **overrides) -> ModelConfig:
    try:
        base = PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    return base.replace(**overrides) if overrides else base


@dataclass(frozen=True)
class TrainSchedule:
    peak_lr: float = 1e-3
    warmup_epochs: int = 40
    total_epochs: int = 64
    steps_per_epoch: int = 1
    weight_decay: float = 0.05
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    batch_size: int = 8
    seed: int = 0
    head_lr_scale: float = 1.0  # fine-tuning: lr multiplier of the freshly initialized head

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))
        if not self.peak_lr > 0:
            raise ConfigError("peak_lr must be positive")
        if not 0 <= self.warmup_epochs < self.total_epochs:
            raise ConfigError("need 0 <= warmup_epochs < total_epochs")
        if not self.head_lr_scale > 0:
            raise ConfigError("head_lr_scale must be positive")
        if self.steps_per_epoch < 1 or self.batch_size < 1:
            raise ConfigError("steps_per_epoch and batch_size must be positive")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")

    @property
    def total_steps(self) -> int:
        return self.total_epochs * self.steps_per_epoch

    @property
    def warmup_steps(self) -> int:
        return self.warmup_epochs * self.steps_per_epoch

    def to_json(self) -> dict:
        d = asdict(self)
        d["betas"] = list(d["betas"])
        return d

    @classmethod
    def from_json(cls, doc: dict) -> "TrainSchedule":
        unknown = set(doc) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown schedule keys {sorted(unknown)}")
        return cls(**doc)

    def replace(self, **changes) -> "TrainSchedule":
        return TrainSchedule.from_json({**self.to_json(), **changes})


# epochs used by the downstream protocols (total, warmup)
PRETRAIN_EPOCHS = (64, 40)
CLASSIFY_EPOCHS = (50, 5)
FLOOD_EPOCHS = (50, 10)
