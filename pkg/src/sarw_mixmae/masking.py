"""Mix masks on the coarse unit grid and the mixing/weight-routing steps.

Convention: a mask unit equal to 0 shows source ``a`` in the mixed input,
1 shows source ``b``.  Each source is reconstructed where it is hidden, so
the per-pixel loss weight at a 0-unit belongs to ``b`` and at a 1-unit to
``a``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError

DEFAULT_MIX_RATIO = 0.5
DEFAULT_MASK_UNIT = 32


@dataclass
class MixMask:
    unit_grid: np.ndarray  # (G, G) uint8
    mask_unit: int
    ratio: float

    @property
    def grid_size(self) -> int:
        return self.unit_grid.shape[0]

    @property
    def input_size(self) -> int:
        return self.grid_size * self.mask_unit

    def complement(self) -> "MixMask":
        return MixMask(1 - self.unit_grid, self.mask_unit, 1.0 - self.ratio)

    def pixels(self) -> np.ndarray:
        """Mask at pixel resolution, ``(input_size, input_size)``."""
        return upsample_grid(self.unit_grid, self.mask_unit)


@dataclass
class MixedSample:
    mixed_input: np.ndarray  # (2, S, S) standardized
    source_a: str
    source_b: str
    mask: MixMask
    weight_a: np.ndarray
    weight_b: np.ndarray


def unit_count(grid: int, ratio: float) -> int:
    return int(round(ratio * grid * grid))


def sample_mask(grid: int, ratio: float, rng: np.random.Generator, mask_unit: int = DEFAULT_MASK_UNIT) -> MixMask:
    """Uniformly random mask with exactly ``round(ratio * grid**2)`` ones."""
    if not 0.0 < ratio < 1.0:
        raise ConfigError(f"mix ratio must lie in (0, 1), got {ratio}")
    k = unit_count(grid, ratio)
    if not 0 < k < grid * grid:
        raise ConfigError(f"ratio {ratio} on a {grid}x{grid} grid selects {k} units; need 0 < k < {grid * grid}")
    flat = np.zeros(grid * grid, dtype=np.uint8)
    flat[rng.permutation(grid * grid)[:k]] = 1
    return MixMask(flat.reshape(grid, grid), mask_unit, ratio)


def upsample_grid(grid: np.ndarray, factor: int) -> np.ndarray:
    return np.kron(grid, np.ones((factor, factor), dtype=grid.dtype))


def downsample_mask(mask: MixMask, stage_stride: int) -> np.ndarray:
    """Mask at the token resolution of a stage with the given pixel stride."""
    if mask.mask_unit % stage_stride:
        raise ConfigError(f"stage stride {stage_stride} does not divide mask unit {mask.mask_unit}")
    return upsample_grid(mask.unit_grid, mask.mask_unit // stage_stride)


def mix(a: np.ndarray, b: np.ndarray, mask: MixMask, weight_a=None, weight_b=None,
        source_a: str = "a", source_b: str = "b") -> MixedSample:
    """Take ``a`` where the covering unit is 0 and ``b`` where it is 1."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ShapeError(f"mix: inputs differ in shape {a.shape} vs {b.shape}")
    if a.shape[-1] != mask.input_size or a.shape[-2] != mask.input_size:
        raise ShapeError(f"mix: mask covers {mask.input_size}px but inputs are {a.shape[-2:]}")
    sel = mask.pixels().astype(bool)
    mixed = np.where(sel, b, a)
    if weight_a is None:
        weight_a = np.ones(a.shape[-2:])
    if weight_b is None:
        weight_b = np.ones(a.shape[-2:])
    return MixedSample(mixed, source_a, source_b, mask, np.asarray(weight_a), np.asarray(weight_b))


def route_weights(sample: MixedSample) -> np.ndarray:
    """Weight of the image being reconstructed at each pixel.

    At a 0-unit ``b`` is hidden and reconstructed, so ``weight_b`` applies;
    at a 1-unit ``a`` is, so ``weight_a`` applies.
    """
    sel = sample.mask.pixels().astype(bool)
    return np.where(sel, sample.weight_a, sample.weight_b)
