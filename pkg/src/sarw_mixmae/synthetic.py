"""Seeded speckled SAR scenes for desk-scale experiments.

A scene is a Voronoi partition of the tile into regions of constant
linear power.  Each channel is multiplied pixel-wise by independent
Gamma(looks, 1/looks) speckle (unit mean), then converted to dB.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .data import DatasetManifest, ManifestEntry, save_manifest, write_tile
from .errors import ConfigError
from .radiometry import DB_CEIL, DB_FLOOR, SarPatch

VV_MINUS_VH_DB = 6.0


@dataclass
class SyntheticSceneSpec:
    """Scene recipe.

    ``region_means_db`` gives the VV mean of each region (VH sits
    ``vh_offset_db`` lower).  When omitted, a scene level is drawn uniformly
    in ``mean_range_db`` and each region deviates from it uniformly by at
    most ``region_spread_db`` (``None``: regions drawn independently over
    the whole range).  With ``class_means_db`` set, every region instead
    picks one class at random and takes that class's mean; the classes
    present become the scene's multi-label bitset.
    """

    size: int = 128
    region_count: int = 6
    region_means_db: Optional[list] = None
    speckle_looks: float = 4
    seed: int = 0
    vh_offset_db: float = -VV_MINUS_VH_DB
    mean_range_db: Sequence[float] = (-25.0, -5.0)
    region_spread_db: Optional[float] = 3.0
    class_means_db: Optional[list] = None

    def __post_init__(self):
        if self.size < 1:
            raise ConfigError(f"size must be positive, got {self.size}")
        if self.region_count < 1:
            raise ConfigError(f"region_count must be positive, got {self.region_count}")
        if self.speckle_looks < 1:
            raise ConfigError(f"speckle_looks must be >= 1, got {self.speckle_looks}")
        if self.region_means_db is not None and len(self.region_means_db) != self.region_count:
            raise ConfigError("region_means_db must have region_count values")
        for m in list(self.region_means_db or []) + list(self.class_means_db or []) + list(self.mean_range_db):
            if not DB_FLOOR <= m <= DB_CEIL:
                raise ConfigError(f"region mean {m} dB outside [{DB_FLOOR}, {DB_CEIL}]")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")

    @classmethod
    def from_json(cls, doc) -> "SyntheticSceneSpec":
        if isinstance(doc, (str, Path)):
            doc = json.loads(Path(doc).read_text())
        unknown = set(doc) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown synthetic spec keys {sorted(unknown)}")
        return cls(**doc)

    def to_json(self) -> dict:
        d = asdict(self)
        d["mean_range_db"] = list(d["mean_range_db"])
        return d


@dataclass
class SyntheticScene:
    patch: SarPatch
    regions: np.ndarray  # int region index per pixel
    region_vv_db: np.ndarray  # clean VV mean per region
    region_class: Optional[np.ndarray] = None

    @property
    def labels(self) -> list:
        if self.region_class is None:
            return []
        present = np.unique(self.regions)
        return sorted({int(self.region_class[r]) for r in present})


def voronoi_regions(size: int, count: int, rng: np.random.Generator) -> np.ndarray:
    centres = rng.uniform(0, size, size=(count, 2))
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    d2 = (yy[..., None] - centres[:, 0]) ** 2 + (xx[..., None] - centres[:, 1]) ** 2
    return np.argmin(d2, axis=-1)


def speckle(shape, looks: float, rng: np.random.Generator) -> np.ndarray:
    """Unit-mean Gamma intensity speckle with ``looks`` equivalent looks."""
    return rng.gamma(shape=looks, scale=1.0 / looks, size=shape)


def draw_region_means(rng, count, mean_range, spread) -> np.ndarray:
    lo, hi = mean_range
    if spread is None:
        return rng.uniform(lo, hi, size=count)
    return rng.uniform(lo, hi) + rng.uniform(-spread, spread, size=count)


def render(regions: np.ndarray, vv_db: np.ndarray, vh_offset_db: float, looks: float,
           rng: np.random.Generator, patch_id: str = "synthetic") -> SarPatch:
    """Speckle a clean piecewise-constant scene and return it in dB."""
    clean_vv = 10.0 ** (vv_db[regions] / 10.0)
    clean_vh = 10.0 ** ((vv_db[regions] + vh_offset_db) / 10.0)
    vh = clean_vh * speckle(regions.shape, looks, rng)
    vv = clean_vv * speckle(regions.shape, looks, rng)
    to_db = lambda x: np.clip(10.0 * np.log10(np.maximum(x, 1e-30)), DB_FLOOR, DB_CEIL).astype(np.float32)
    return SarPatch(patch_id, to_db(vh), to_db(vv))


def generate_synthetic_scene(spec: SyntheticSceneSpec, patch_id: Optional[str] = None) -> SyntheticScene:
    """Render one scene; bit-identical for identical ``spec`` (including seed)."""
    rng = np.random.default_rng(spec.seed)
    regions = voronoi_regions(spec.size, spec.region_count, rng)
    region_class = None
    if spec.class_means_db is not None:
        region_class = rng.integers(0, len(spec.class_means_db), size=spec.region_count)
        means = np.asarray(spec.class_means_db, dtype=np.float64)[region_class]
    elif spec.region_means_db is not None:
        means = np.asarray(spec.region_means_db, dtype=np.float64)
    else:
        means = draw_region_means(rng, spec.region_count, spec.mean_range_db, spec.region_spread_db)
    patch = render(regions, means, spec.vh_offset_db, spec.speckle_looks, rng,
                   patch_id or f"synth-{spec.seed}")
    return SyntheticScene(patch, regions, means, region_class)


def scene_seed(base_seed: int, index: int) -> int:
    """Independent 63-bit seed for item ``index`` of a generated collection."""
    return int(np.random.SeedSequence([base_seed % 2**64, index]).generate_state(1, np.uint64)[0] >> np.uint64(1))


def synthetic_scenes(spec: SyntheticSceneSpec, count: int) -> list:
    out = []
    for i in range(count):
        s = SyntheticSceneSpec(**{**spec.to_json(), "seed": scene_seed(spec.seed, i)})
        out.append(generate_synthetic_scene(s, patch_id=f"synth-{i:06d}"))
    return out


def split_for_index(i: int, count: int) -> str:
    """80/10/10 split of a sorted index range."""
    n_train = int(round(0.8 * count))
    n_val = int(round(0.1 * count))
    if i < n_train:
        return "train"
    if i < n_train + n_val:
        return "val"
    return "test"


def write_synthetic_dataset(spec: SyntheticSceneSpec, count: int, out_dir) -> DatasetManifest:
    """Write ``count`` scenes as tile pairs plus ``manifest.json``."""
    out_dir = Path(out_dir)
    (out_dir / "tiles").mkdir(parents=True, exist_ok=True)
    entries = []
    for i, scene in enumerate(synthetic_scenes(spec, count)):
        pid = scene.patch.id
        vh, vv = f"tiles/{pid}_vh.sarw", f"tiles/{pid}_vv.sarw"
        write_tile(out_dir / vh, scene.patch.vh_db)
        write_tile(out_dir / vv, scene.patch.vv_db)
        labels = scene.labels if spec.class_means_db is not None else None
        entries.append(ManifestEntry(pid, vh, vv, split_for_index(i, count), labels=labels))
    manifest = DatasetManifest(out_dir, entries)
    save_manifest(manifest)
    return manifest


# --------------------------------------------------------------------------
# flood benchmark


@dataclass
class FloodBenchmarkSpec:
    """Pairs of same-footprint acquisitions; flood pairs darken one region.

    The query is an independent speckle realisation of the reference scene;
    for flood pairs the region under a uniformly drawn pixel (an area-weighted
    region choice) is lowered by ``depression_db`` to mimic open water.
    """

    size: int = 512
    region_count: int = 12
    speckle_looks: float = 4
    depression_db: float = 6.0
    mean_range_db: Sequence[float] = (-25.0, -5.0)
    region_spread_db: Optional[float] = 3.0
    seed: int = 0


def synthetic_flood_pairs(spec: FloodBenchmarkSpec, count: int, flood_fraction: float = 0.5) -> list:
    """``count`` FloodPair objects, label 1 for roughly ``flood_fraction`` of them."""
    from .data import FloodPair

    pairs = []
    n_flood = int(round(flood_fraction * count))
    for i in range(count):
        rng = np.random.default_rng(scene_seed(spec.seed, i))
        regions = voronoi_regions(spec.size, spec.region_count, rng)
        means = draw_region_means(rng, spec.region_count, spec.mean_range_db, spec.region_spread_db)
        label = int(i < n_flood)
        ref = render(regions, means, -VV_MINUS_VH_DB, spec.speckle_looks, rng, f"fp{i:05d}-ref")
        q_means = means.copy()
        if label:
            # the region under a uniformly drawn pixel floods, so larger regions flood more often
            row, col = rng.integers(spec.size, size=2)
            q_means[regions[row, col]] -= spec.depression_db
        query = render(regions, q_means, -VV_MINUS_VH_DB, spec.speckle_looks, rng, f"fp{i:05d}-qry")
        pairs.append(FloodPair(ref, query, label, f"fp{i:05d}", "train"))
    order = np.random.default_rng(scene_seed(spec.seed, count)).permutation(count)
    return [pairs[j] for j in order]
