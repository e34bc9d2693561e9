import json

import numpy as np
import pytest

from sarw_mixmae.data import scan_manifest
from sarw_mixmae.errors import ConfigError
from sarw_mixmae.radiometry import db_to_linear
from sarw_mixmae.synthetic import (
    FloodBenchmarkSpec,
    SyntheticSceneSpec,
    generate_synthetic_scene,
    synthetic_flood_pairs,
    write_synthetic_dataset,
)


def region_linear(scene, channel="vv"):
    lin = db_to_linear(getattr(scene.patch, f"{channel}_db").astype(np.float64))
    return {r: lin[scene.regions == r] for r in np.unique(scene.regions)}


def test_many_looks_recovers_region_means():
    spec = SyntheticSceneSpec(size=64, region_count=4, region_means_db=[-20.0, -12.0, -6.0, -2.0],
                              speckle_looks=1e6, seed=3)
    scene = generate_synthetic_scene(spec)
    for r, vals in region_linear(scene).items():
        expected = 10 ** (spec.region_means_db[r] / 10)
        assert vals.mean() == pytest.approx(expected, rel=0.01)


def test_single_look_coefficient_of_variation():
    spec = SyntheticSceneSpec(size=256, region_count=2, region_means_db=[-12.0, -6.0], speckle_looks=1, seed=11)
    scene = generate_synthetic_scene(spec)
    for vals in region_linear(scene).values():
        assert vals.size >= 10_000
        assert vals.std() / vals.mean() == pytest.approx(1.0, rel=0.05)


@pytest.mark.parametrize("looks", [1, 4, 16])
def test_speckle_is_unit_mean_within_3_sigma(looks):
    spec = SyntheticSceneSpec(size=192, region_count=3, region_means_db=[-15.0, -9.0, -4.0],
                              speckle_looks=looks, seed=5)
    scene = generate_synthetic_scene(spec)
    for channel, offset in (("vv", 0.0), ("vh", spec.vh_offset_db)):
        for r, vals in region_linear(scene, channel).items():
            clean = 10 ** ((spec.region_means_db[r] + offset) / 10)
            sigma = clean / np.sqrt(looks * vals.size)
            assert abs(vals.mean() - clean) < 3 * sigma


def test_same_seed_bit_identical():
    spec = SyntheticSceneSpec(size=64, seed=42)
    a, b = generate_synthetic_scene(spec), generate_synthetic_scene(spec)
    assert a.patch.vh_db.tobytes() == b.patch.vh_db.tobytes()
    assert a.patch.vv_db.tobytes() == b.patch.vv_db.tobytes()
    c = generate_synthetic_scene(SyntheticSceneSpec(size=64, seed=43))
    assert c.patch.vv_db.tobytes() != a.patch.vv_db.tobytes()


def test_spec_validation():
    with pytest.raises(ConfigError):
        SyntheticSceneSpec(speckle_looks=0.5)
    with pytest.raises(ConfigError):
        SyntheticSceneSpec(region_count=2, region_means_db=[-60.0, -3.0])
    with pytest.raises(ConfigError):
        SyntheticSceneSpec.from_json({"size": 32, "bogus": 1})


def test_class_labels_are_region_occupancy():
    spec = SyntheticSceneSpec(size=64, region_count=5, class_means_db=[-20.0, -10.0, -3.0], seed=9)
    scene = generate_synthetic_scene(spec)
    present = sorted({int(scene.region_class[r]) for r in np.unique(scene.regions)})
    assert scene.labels == present


def test_write_dataset_split_and_manifest(tmp_path):
    spec = SyntheticSceneSpec(size=32, seed=1)
    m = write_synthetic_dataset(spec, 10, tmp_path)
    assert m.counts() == {"train": 8, "val": 1, "test": 1}
    assert len(scan_manifest(tmp_path).entries) == 10
    json.loads((tmp_path / "manifest.json").read_text())


def test_flood_pairs_construction():
    spec = FloodBenchmarkSpec(size=64, region_count=4, seed=2)
    pairs = synthetic_flood_pairs(spec, 6)
    assert sorted(p.label for p in pairs) == [0, 0, 0, 1, 1, 1]
    for p in pairs:
        diff = p.query.vv_db.astype(np.float64) - p.reference.vv_db
        assert p.reference.vv_db.shape == (64, 64)
        # fresh speckle on every acquisition
        assert np.abs(diff).max() > 0
