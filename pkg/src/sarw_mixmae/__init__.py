"""Backscatter-weighted mixed masked autoencoder pretraining for dual-polarization SAR.

Submodules:
    radiometry  dB/linear conversion and the per-pixel loss weight map
    data        tile format, manifests, resizing, standardization, flood pairs
    synthetic   speckled synthetic scenes and the flood-pair benchmark
    masking     mix masks, mixing and weight routing
    network     shifted-window encoder, dual-reconstruction decoder, task heads
    objectives  weighted reconstruction loss, downstream losses, metrics
    training    AdamW, schedules, pretraining and fine-tuning loops
    checkpoint  the SWCK checkpoint format
    cli         the ``sarw`` command
"""
from .config import PRESETS, ModelConfig, TrainSchedule, preset
from .errors import (
    CheckpointError,
    ConfigError,
    DataLoadError,
    NumericDivergenceError,
    RadiometryError,
    SarwError,
    ShapeError,
)
from .radiometry import SarPatch, compute_weight_map, db_to_linear, linear_to_db

__version__ = "0.1.0"

__all__ = [
    "PRESETS",
    "ModelConfig",
    "TrainSchedule",
    "preset",
    "SarPatch",
    "compute_weight_map",
    "db_to_linear",
    "linear_to_db",
    "SarwError",
    "ConfigError",
    "DataLoadError",
    "RadiometryError",
    "ShapeError",
    "NumericDivergenceError",
    "CheckpointError",
]
