"""Backscatter radiometry: dB/linear conversion and the per-pixel loss weights.

The weight map emphasises dark (low backscatter) pixels::

    avg = (10**(vh_db / 10) + 10**(vv_db / 10)) / 2
    w = exp(1 - (avg - avg.min()) / (avg.max() - avg.min()))

so every weight lies in ``[1, e]``.  Normalization is done per patch and
always on the raw dB values, never on standardized network inputs.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import RadiometryError, ShapeError

DB_FLOOR = -50.0
DB_CEIL = 10.0
E = math.e


@dataclass
class SarPatch:
    """Dual-polarization tile in dB.

    ``vh_db`` and ``vv_db`` are float arrays of identical shape.
    """

    id: str
    vh_db: np.ndarray
    vv_db: np.ndarray

    def __post_init__(self):
        self.vh_db = np.asarray(self.vh_db)
        self.vv_db = np.asarray(self.vv_db)
        if self.vh_db.ndim != 2 or self.vh_db.shape != self.vv_db.shape:
            raise ShapeError(
                f"patch {self.id!r}: VH {self.vh_db.shape} and VV {self.vv_db.shape} must be equal 2-D grids"
            )

    @property
    def height(self) -> int:
        return self.vh_db.shape[0]

    @property
    def width(self) -> int:
        return self.vh_db.shape[1]

    def stacked(self) -> np.ndarray:
        """Return a ``(2, H, W)`` array ordered (VH, VV)."""
        return np.stack([self.vh_db, self.vv_db])


def _check_finite(grid: np.ndarray, what: str) -> None:
    bad = ~np.isfinite(grid)
    if bad.any():
        idx = tuple(int(i) for i in np.argwhere(bad)[0])
        raise RadiometryError(f"{what}: non-finite value {grid[idx]!r} at index {idx}")


def db_to_linear(db_grid) -> np.ndarray:
    """Convert backscatter in dB to linear power, ``10**(dB/10)``."""
    db = np.asarray(db_grid, dtype=np.float64)
    _check_finite(db, "db_to_linear")
    return np.power(10.0, db / 10.0)


def linear_to_db(linear_grid) -> np.ndarray:
    """Convert linear power to dB, ``10*log10(x)``; rejects x <= 0."""
    lin = np.asarray(linear_grid, dtype=np.float64)
    _check_finite(lin, "linear_to_db")
    bad = lin <= 0
    if bad.any():
        idx = tuple(int(i) for i in np.argwhere(bad)[0])
        raise RadiometryError(f"linear_to_db: nonpositive power {lin[idx]!r} at index {idx}")
    return 10.0 * np.log10(lin)


def average_linear(vh, vv) -> np.ndarray:
    vh = np.asarray(vh, dtype=np.float64)
    vv = np.asarray(vv, dtype=np.float64)
    if vh.shape != vv.shape:
        raise ShapeError(f"average_linear: VH {vh.shape} vs VV {vv.shape}")
    return (vh + vv) / 2.0


def min_max_normalize(grid) -> np.ndarray:
    """Affinely map ``grid`` onto [0, 1].

    A constant grid maps to all zeros (its weights are then uniformly e).
    """
    x = np.asarray(grid, dtype=np.float64)
    _check_finite(x, "min_max_normalize")
    lo = x.min()
    hi = x.max()
    if hi == lo:
        return np.zeros_like(x)
    out = (x - lo) / (hi - lo)
    # guard the endpoints against rounding so the [0, 1] range is exact
    return np.clip(out, 0.0, 1.0)


def weight_map_from_db(vh_db, vv_db) -> np.ndarray:
    """Weight map from raw dB channels, see :func:`compute_weight_map`."""
    avg = average_linear(db_to_linear(vh_db), db_to_linear(vv_db))
    return np.exp(1.0 - min_max_normalize(avg))


def compute_weight_map(patch: SarPatch) -> np.ndarray:
    """Per-pixel reconstruction-loss weights of ``patch``, values in ``[1, e]``.

    The brightest pixel (largest mean linear power) gets weight 1 and the
    darkest gets ``e``.
    """
    return weight_map_from_db(patch.vh_db, patch.vv_db)
