"""Dataset manifests, the binary tile format, standardization and flood pairing.

Tile files (``*.sarw``) hold one channel each::

    b"SARW" | u16 version=1 | u32 height | u32 width | float32[height*width]

all little-endian, row-major, dB units.  ``manifest.json`` at a dataset
root lists the tiles::

    {"version": 1, "entries": [{"id": ..., "vh": relpath, "vv": relpath,
      "labels": [int, ...]?, "split": "train|val|test",
      "footprint": str?, "flood": bool?, "timestamp": str?}, ...]}
"""
from __future__ import annotations

import json
import logging
import struct
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import numpy as np
from scipy import ndimage

from .errors import DataLoadError, ShapeError
from .radiometry import DB_CEIL, DB_FLOOR, SarPatch

log = logging.getLogger(__name__)

TILE_MAGIC = b"SARW"
TILE_VERSION = 1
_TILE_HEADER = struct.Struct("<4sHII")
MANIFEST_NAME = "manifest.json"
SPLITS = ("train", "val", "test")
ZERO_COVERAGE_LIMIT = 0.25


# --------------------------------------------------------------------------
# tile format


def write_tile(path, grid) -> None:
    grid = np.asarray(grid)
    if grid.ndim != 2:
        raise ShapeError(f"tile must be 2-D, got shape {grid.shape}")
    h, w = grid.shape
    with open(path, "wb") as fh:
        fh.write(_TILE_HEADER.pack(TILE_MAGIC, TILE_VERSION, h, w))
        fh.write(np.ascontiguousarray(grid, dtype="<f4").tobytes())


def read_tile(path) -> np.ndarray:
    """Read one tile file as a float32 array, values exactly as stored."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise DataLoadError(f"cannot read tile {path}: {exc}") from exc
    if len(raw) < _TILE_HEADER.size:
        raise DataLoadError(f"truncated tile header in {path}")
    magic, version, h, w = _TILE_HEADER.unpack_from(raw)
    if magic != TILE_MAGIC:
        raise DataLoadError(f"bad magic {magic!r} in {path}")
    if version != TILE_VERSION:
        raise DataLoadError(f"unsupported tile version {version} in {path}")
    expected = _TILE_HEADER.size + 4 * h * w
    if len(raw) != expected:
        raise DataLoadError(f"truncated tile {path}: {len(raw)} bytes, header implies {expected}")
    return np.frombuffer(raw, dtype="<f4", offset=_TILE_HEADER.size).reshape(h, w).astype(np.float32)


# --------------------------------------------------------------------------
# manifest


@dataclass
class ManifestEntry:
    id: str
    vh: str
    vv: str
    split: str
    labels: Optional[list] = None
    footprint: Optional[str] = None
    flood: Optional[bool] = None
    timestamp: Optional[str] = None

    def to_json(self) -> dict:
        out = {"id": self.id, "vh": self.vh, "vv": self.vv, "split": self.split}
        for key in ("labels", "footprint", "flood", "timestamp"):
            value = getattr(self, key)
            if value is not None:
                out[key] = value
        return out


@dataclass
class DatasetManifest:
    root: Path
    entries: list = field(default_factory=list)

    def split(self, name: str) -> list:
        return [e for e in self.entries if e.split == name]

    def counts(self) -> dict:
        return {s: sum(e.split == s for e in self.entries) for s in SPLITS}

    def path(self, rel: str) -> Path:
        return Path(self.root) / rel


_ENTRY_KEYS = {"id", "vh", "vv", "labels", "split", "footprint", "flood", "timestamp"}


def _parse_entry(raw, i) -> ManifestEntry:
    if not isinstance(raw, dict):
        raise DataLoadError(f"manifest entry {i} is not an object")
    unknown = set(raw) - _ENTRY_KEYS
    if unknown:
        raise DataLoadError(f"manifest entry {i}: unknown keys {sorted(unknown)}")
    for key in ("id", "vh", "vv", "split"):
        if not isinstance(raw.get(key), str):
            raise DataLoadError(f"manifest entry {i}: missing or non-string {key!r}")
    if raw["split"] not in SPLITS:
        raise DataLoadError(f"manifest entry {i}: split must be one of {SPLITS}, got {raw['split']!r}")
    labels = raw.get("labels")
    if labels is not None and not (
        isinstance(labels, list) and all(isinstance(x, int) and not isinstance(x, bool) and x >= 0 for x in labels)
    ):
        raise DataLoadError(f"manifest entry {i}: labels must be a list of nonnegative ints")
    flood = raw.get("flood")
    if flood is not None and not isinstance(flood, bool):
        raise DataLoadError(f"manifest entry {i}: flood must be a boolean")
    return ManifestEntry(
        id=raw["id"], vh=raw["vh"], vv=raw["vv"], split=raw["split"], labels=labels,
        footprint=raw.get("footprint"), flood=flood, timestamp=raw.get("timestamp"),
    )


def scan_manifest(root) -> DatasetManifest:
    """Read and validate ``root/manifest.json``.

    Raises:
        DataLoadError: the manifest is missing or malformed, ids repeat,
            or a referenced raster does not exist.
    """
    root = Path(root)
    mpath = root / MANIFEST_NAME
    if not mpath.is_file():
        raise DataLoadError(f"manifest not found: {mpath}")
    try:
        doc = json.loads(mpath.read_text())
    except (OSError, ValueError) as exc:
        raise DataLoadError(f"malformed manifest {mpath}: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("version") != 1 or not isinstance(doc.get("entries"), list):
        raise DataLoadError(f"malformed manifest {mpath}: expected version 1 with an entries list")
    entries = [_parse_entry(raw, i) for i, raw in enumerate(doc["entries"])]
    seen = set()
    for e in entries:
        if e.id in seen:
            raise DataLoadError(f"duplicate patch id {e.id!r} in {mpath}")
        seen.add(e.id)
        for rel in (e.vh, e.vv):
            if not (root / rel).is_file():
                raise DataLoadError(f"entry {e.id!r} references missing raster {root / rel}")
    manifest = DatasetManifest(root=root, entries=entries)
    log.info("manifest %s: %s", mpath, manifest.counts())
    return manifest


def save_manifest(manifest: DatasetManifest) -> Path:
    doc = {"version": 1, "entries": [e.to_json() for e in manifest.entries]}
    path = Path(manifest.root) / MANIFEST_NAME
    path.write_text(json.dumps(doc, indent=1) + "\n")
    return path


# --------------------------------------------------------------------------
# patch loading


@dataclass
class LoadCounters:
    """Running tallies of repairs made while loading tiles."""

    nan_replaced: int = 0


def sanitize_db(grid: np.ndarray, counters: Optional[LoadCounters] = None) -> np.ndarray:
    """Replace NaN by the dB floor and clamp to ``[DB_FLOOR, DB_CEIL]``."""
    grid = np.array(grid, dtype=np.float32)
    nan = np.isnan(grid)
    if nan.any():
        grid[nan] = DB_FLOOR
        if counters is not None:
            counters.nan_replaced += int(nan.sum())
    return np.clip(grid, DB_FLOOR, DB_CEIL)


def load_patch(entry: ManifestEntry, root, counters: Optional[LoadCounters] = None,
               keep_raw: bool = False) -> SarPatch:
    """Load both channels of ``entry``; values are sanitized with :func:`sanitize_db`.

    With ``keep_raw`` the unsanitized channels are attached as ``patch.raw``
    (needed for zero-coverage screening).
    """
    root = Path(root)
    vh = read_tile(root / entry.vh)
    vv = read_tile(root / entry.vv)
    if vh.shape != vv.shape:
        raise DataLoadError(f"entry {entry.id!r}: VH {vh.shape} and VV {vv.shape} differ")
    patch = SarPatch(entry.id, sanitize_db(vh, counters), sanitize_db(vv, counters))
    if keep_raw:
        patch.raw = (vh, vv)
    return patch


def save_patch(patch: SarPatch, vh_path, vv_path) -> None:
    write_tile(vh_path, patch.vh_db)
    write_tile(vv_path, patch.vv_db)


def resize_patch(p: SarPatch, target: int) -> SarPatch:
    """Bilinear resize of both channels (in dB) to ``target x target``."""
    if target < 1:
        raise ValueError(f"target size must be >= 1, got {target}")
    if p.height == target and p.width == target:
        return SarPatch(p.id, p.vh_db.copy(), p.vv_db.copy())
    zoom = (target / p.height, target / p.width)

    def one(ch):
        return ndimage.zoom(np.asarray(ch, dtype=np.float64), zoom, order=1, mode="nearest", grid_mode=True)

    return SarPatch(p.id, one(p.vh_db).astype(np.float32), one(p.vv_db).astype(np.float32))


def zero_coverage_fraction(p: SarPatch) -> float:
    """Fraction of pixels whose stored value is exactly 0 in VH or VV."""
    vh, vv = getattr(p, "raw", (p.vh_db, p.vv_db))
    zero = (np.asarray(vh) == 0) | (np.asarray(vv) == 0)
    return float(zero.mean())


# --------------------------------------------------------------------------
# standardization


@dataclass(frozen=True)
class StandardizationStats:
    mean_vh: float
    std_vh: float
    mean_vv: float
    std_vv: float

    @property
    def mean(self) -> np.ndarray:
        return np.array([self.mean_vh, self.mean_vv])

    @property
    def std(self) -> np.ndarray:
        return np.array([self.std_vh, self.std_vv])

    def to_json(self) -> dict:
        return {"mean_vh": self.mean_vh, "std_vh": self.std_vh, "mean_vv": self.mean_vv, "std_vv": self.std_vv}


class _Welford:
    # Chan et al. merge of per-patch blocks into running (count, mean, M2)
    def __init__(self):
        self.n = 0
        self.mean = 0.0
        self.m2 = 0.0

    def update(self, block: np.ndarray) -> None:
        block = np.asarray(block, dtype=np.float64).ravel()
        nb = block.size
        if nb == 0:
            return
        mb = block.mean()
        m2b = ((block - mb) ** 2).sum()
        n = self.n + nb
        delta = mb - self.mean
        self.mean += delta * nb / n
        self.m2 += m2b + delta * delta * self.n * nb / n
        self.n = n

    @property
    def std(self) -> float:
        return float(np.sqrt(self.m2 / self.n)) if self.n else 0.0


def stats_from_patches(patches: Iterable[SarPatch]) -> StandardizationStats:
    """Per-channel population mean/std streamed over ``patches`` in one pass."""
    acc_vh, acc_vv = _Welford(), _Welford()
    for p in patches:
        acc_vh.update(p.vh_db)
        acc_vv.update(p.vv_db)
    if acc_vh.n == 0:
        raise DataLoadError("cannot compute standardization statistics of an empty split")
    if not (acc_vh.std > 0 and acc_vv.std > 0):
        raise DataLoadError("zero variance in training data; standardization undefined")
    return StandardizationStats(float(acc_vh.mean), acc_vh.std, float(acc_vv.mean), acc_vv.std)


def compute_standardization(manifest: DatasetManifest, split: str = "train",
                            counters: Optional[LoadCounters] = None) -> StandardizationStats:
    entries = manifest.split(split)
    if not entries:
        raise DataLoadError(f"split {split!r} is empty")
    return stats_from_patches(load_patch(e, manifest.root, counters) for e in entries)


def standardize(p: SarPatch, stats: StandardizationStats) -> np.ndarray:
    """Network input ``(2, H, W)``: per-channel ``(x - mean) / std`` in float32."""
    x = p.stacked().astype(np.float64)
    return ((x - stats.mean[:, None, None]) / stats.std[:, None, None]).astype(np.float32)


def destandardize(x: np.ndarray, stats: StandardizationStats) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x * stats.std[:, None, None] + stats.mean[:, None, None]


# --------------------------------------------------------------------------
# flood pairs


@dataclass
class FloodPair:
    reference: SarPatch
    query: SarPatch
    label: int  # 1 = flood
    footprint: str
    split: str


def build_flood_pairs(manifest: DatasetManifest, split: Optional[str] = None,
                      counters: Optional[LoadCounters] = None, patches: Optional[dict] = None,
                      report: Optional[dict] = None) -> list:
    """Pair every non-flood acquisition with each other acquisition of its footprint.

    Acquisitions with zero-coverage fraction >= 0.25 are dropped first.
    Pairs are sorted by (footprint, reference timestamp, query timestamp),
    so the result does not depend on manifest order.  ``patches`` may map
    entry id to an already loaded patch.  Footprints without a usable
    non-flood reference are skipped; their count goes to ``report["skipped"]``.
    """
    groups = defaultdict(list)
    for e in manifest.entries:
        if split is not None and e.split != split:
            continue
        if e.footprint is None or e.flood is None:
            raise DataLoadError(f"entry {e.id!r} lacks footprint/flood fields needed for pairing")
        groups[e.footprint].append(e)

    pairs = []
    skipped = 0
    for footprint in sorted(groups):
        members = sorted(groups[footprint], key=lambda e: (e.timestamp or "", e.id))
        valid = []
        for e in members:
            p = patches[e.id] if patches and e.id in patches else load_patch(e, manifest.root, counters, keep_raw=True)
            if zero_coverage_fraction(p) >= ZERO_COVERAGE_LIMIT:
                continue
            valid.append((e, p))
        refs = [(e, p) for e, p in valid if not e.flood]
        if not refs:
            skipped += 1
            continue
        for re_, rp in refs:
            for qe, qp in valid:
                if qe.id == re_.id:
                    continue
                pairs.append(FloodPair(rp, qp, int(bool(qe.flood)), footprint, re_.split))
    if skipped:
        log.warning("build_flood_pairs: skipped %d footprint(s) without a valid non-flood reference", skipped)
    if report is not None:
        report["skipped"] = skipped
    return pairs
