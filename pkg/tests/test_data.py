import json

import numpy as np
import pytest

from sarw_mixmae.data import (
    DatasetManifest,
    LoadCounters,
    ManifestEntry,
    build_flood_pairs,
    compute_standardization,
    destandardize,
    load_patch,
    read_tile,
    resize_patch,
    save_manifest,
    scan_manifest,
    standardize,
    stats_from_patches,
    write_tile,
    zero_coverage_fraction,
)
from sarw_mixmae.errors import DataLoadError
from sarw_mixmae.radiometry import SarPatch


def make_dataset(root, grids, splits=None, extra=None):
    root.mkdir(exist_ok=True)
    entries = []
    for i, (vh, vv) in enumerate(grids):
        write_tile(root / f"p{i}_vh.sarw", vh)
        write_tile(root / f"p{i}_vv.sarw", vv)
        kw = extra[i] if extra else {}
        entries.append(ManifestEntry(f"p{i}", f"p{i}_vh.sarw", f"p{i}_vv.sarw",
                                     splits[i] if splits else "train", **kw))
    save_manifest(DatasetManifest(root, entries))
    return root


def test_tile_round_trip_bit_exact(tmp_path, rng):
    grid = rng.normal(-12, 5, (7, 5)).astype(np.float32)
    write_tile(tmp_path / "a.sarw", grid)
    back = read_tile(tmp_path / "a.sarw")
    assert back.dtype == np.float32 and back.shape == (7, 5)
    np.testing.assert_array_equal(back, grid)
    write_tile(tmp_path / "b.sarw", back)
    assert (tmp_path / "a.sarw").read_bytes() == (tmp_path / "b.sarw").read_bytes()


def test_tile_header_layout(tmp_path):
    write_tile(tmp_path / "a.sarw", np.zeros((2, 3), np.float32))
    raw = (tmp_path / "a.sarw").read_bytes()
    assert raw[:4] == b"SARW"
    assert raw[4:6] == (1).to_bytes(2, "little")
    assert raw[6:10] == (2).to_bytes(4, "little") and raw[10:14] == (3).to_bytes(4, "little")
    assert len(raw) == 14 + 6 * 4


def test_truncated_tile_rejected(tmp_path):
    write_tile(tmp_path / "a.sarw", np.zeros((4, 4), np.float32))
    raw = (tmp_path / "a.sarw").read_bytes()
    (tmp_path / "a.sarw").write_bytes(raw[:-3])
    with pytest.raises(DataLoadError, match="truncated"):
        read_tile(tmp_path / "a.sarw")


def test_scan_manifest_errors(tmp_path, rng):
    with pytest.raises(DataLoadError, match="manifest not found"):
        scan_manifest(tmp_path)
    root = make_dataset(tmp_path / "ds", [(rng.normal(size=(4, 4)), rng.normal(size=(4, 4)))] * 3,
                        splits=["train", "val", "test"])
    m = scan_manifest(root)
    assert len(m.entries) == 3 and m.counts() == {"train": 1, "val": 1, "test": 1}
    (root / "p1_vv.sarw").unlink()
    with pytest.raises(DataLoadError, match="p1_vv.sarw"):
        scan_manifest(root)


def test_scan_manifest_duplicate_and_malformed(tmp_path, rng):
    root = make_dataset(tmp_path, [(np.zeros((2, 2)), np.zeros((2, 2)))] * 2)
    doc = json.loads((root / "manifest.json").read_text())
    doc["entries"][1]["id"] = "p0"
    (root / "manifest.json").write_text(json.dumps(doc))
    with pytest.raises(DataLoadError, match="duplicate"):
        scan_manifest(root)
    (root / "manifest.json").write_text("{not json")
    with pytest.raises(DataLoadError, match="malformed"):
        scan_manifest(root)


def test_load_patch_shapes_nan_and_clamp(tmp_path):
    vh = np.full((120, 120), -20.0, np.float32)
    vv = np.full((120, 120), -14.0, np.float32)
    vh[3, 4] = np.nan
    vv[0, 0] = 25.0
    vv[0, 1] = -80.0
    root = make_dataset(tmp_path, [(vh, vv)])
    m = scan_manifest(root)
    counters = LoadCounters()
    p = load_patch(m.entries[0], root, counters)
    assert (p.height, p.width) == (120, 120)
    assert p.vh_db[3, 4] == -50.0 and counters.nan_replaced == 1
    assert p.vv_db[0, 0] == 10.0 and p.vv_db[0, 1] == -50.0


def test_load_patch_channel_mismatch(tmp_path):
    write_tile(tmp_path / "vh.sarw", np.zeros((4, 4)))
    write_tile(tmp_path / "vv.sarw", np.zeros((4, 5)))
    entry = ManifestEntry("x", "vh.sarw", "vv.sarw", "train")
    with pytest.raises(DataLoadError):
        load_patch(entry, tmp_path)


def test_resize_patch(rng):
    p = SarPatch("r", rng.normal(-15, 3, (120, 120)), rng.normal(-9, 3, (120, 120)))
    out = resize_patch(p, 128)
    assert (out.height, out.width) == (128, 128)
    same = resize_patch(p, 120)
    np.testing.assert_allclose(same.vh_db, p.vh_db, atol=1e-6)
    const = resize_patch(SarPatch("c", np.full((120, 120), -7.5), np.full((120, 120), -3.0)), 128)
    np.testing.assert_allclose(const.vh_db, -7.5, atol=1e-6)
    np.testing.assert_allclose(const.vv_db, -3.0, atol=1e-6)
    with pytest.raises(ValueError):
        resize_patch(p, 0)


def test_standardization_closed_form():
    # patch A: VH all 1, VV all 2; patch B: VH all 3, VV all 6 -> means 2, 4; stds 1, 2
    a = SarPatch("a", np.ones((2, 2)), np.full((2, 2), 2.0))
    b = SarPatch("b", np.full((2, 2), 3.0), np.full((2, 2), 6.0))
    s = stats_from_patches([a, b])
    assert (s.mean_vh, s.std_vh, s.mean_vv, s.std_vv) == pytest.approx((2.0, 1.0, 4.0, 2.0), abs=1e-12)
    s2 = stats_from_patches([b, a])
    assert s2.to_json() == pytest.approx(s.to_json(), rel=1e-12)


def test_standardization_zero_variance_and_empty():
    with pytest.raises(DataLoadError, match="zero variance"):
        stats_from_patches([SarPatch("c", np.full((3, 3), -5.0), np.full((3, 3), -1.0))])
    with pytest.raises(DataLoadError):
        stats_from_patches([])


def test_standardization_matches_numpy(tmp_path, rng):
    grids = [(rng.normal(-15, 4, (8, 8)).astype(np.float32), rng.normal(-8, 2, (8, 8)).astype(np.float32))
             for _ in range(5)]
    root = make_dataset(tmp_path, grids, splits=["train"] * 4 + ["test"])
    s = compute_standardization(scan_manifest(root))
    vh = np.concatenate([g[0].ravel() for g in grids[:4]]).astype(np.float64)
    assert s.mean_vh == pytest.approx(vh.mean(), rel=1e-12)
    assert s.std_vh == pytest.approx(vh.std(), rel=1e-12)


def test_standardize_and_invert(rng):
    a = SarPatch("a", np.ones((2, 2)), np.full((2, 2), 2.0))
    b = SarPatch("b", np.full((2, 2), 3.0), np.full((2, 2), 6.0))
    s = stats_from_patches([a, b])
    mean_patch = SarPatch("m", np.full((2, 2), s.mean_vh), np.full((2, 2), s.mean_vv))
    np.testing.assert_allclose(standardize(mean_patch, s), 0.0, atol=1e-7)
    plus = SarPatch("p", np.full((2, 2), s.mean_vh + s.std_vh), np.full((2, 2), s.mean_vv + s.std_vv))
    np.testing.assert_allclose(standardize(plus, s), 1.0, atol=1e-7)
    p = SarPatch("r", rng.normal(-15, 4, (6, 6)), rng.normal(-8, 2, (6, 6)))
    z = standardize(p, s)
    loop = np.array([[[(p.stacked()[c, i, j] - s.mean[c]) / s.std[c] for j in range(6)] for i in range(6)]
                     for c in range(2)])
    np.testing.assert_allclose(z, loop, rtol=1e-6)
    np.testing.assert_allclose(destandardize(z, s), p.stacked(), atol=1e-5)


def test_zero_coverage_fraction():
    zero = SarPatch("z", np.zeros((4, 4)), np.zeros((4, 4)))
    assert zero_coverage_fraction(zero) == 1.0
    none = SarPatch("n", np.full((4, 4), -3.0), np.full((4, 4), -3.0))
    assert zero_coverage_fraction(none) == 0.0
    vh = np.full((4, 4), -3.0)
    vv = np.full((4, 4), -3.0)
    vh[0, :2] = 0
    vv[1, :2] = 0
    assert zero_coverage_fraction(SarPatch("q", vh, vv)) == 0.25


def _flood_dataset(tmp_path, members):
    grids, extra = [], []
    for fp, flood, ts, zero in members:
        g = np.full((8, 8), -12.0, np.float32)
        if zero:
            g[:4] = 0.0
        grids.append((g, g.copy()))
        extra.append({"footprint": fp, "flood": flood, "timestamp": ts})
    return scan_manifest(make_dataset(tmp_path, grids, extra=extra))


def test_flood_pairs_combinatorics(tmp_path):
    m = _flood_dataset(tmp_path, [("A", False, "t0", False), ("A", True, "t1", False), ("A", False, "t2", True),
                                  ("A", True, "t3", False)])
    # the t2 member is half zeros and drops out: 1 reference, 2 others
    pairs = build_flood_pairs(m)
    assert len(pairs) == 2
    assert all(p.reference.id == "p0" for p in pairs)
    assert [p.label for p in pairs] == [1, 1]


def test_flood_pairs_all_filtered(tmp_path):
    m = _flood_dataset(tmp_path, [("A", False, "t0", True), ("A", True, "t1", True)])
    report = {}
    assert build_flood_pairs(m, report=report) == []
    assert report["skipped"] == 1


def test_flood_pairs_order_independent(tmp_path):
    m = _flood_dataset(tmp_path, [("B", False, "t0", False), ("A", False, "t0", False), ("B", True, "t1", False),
                                  ("A", False, "t1", False)])
    p1 = [(p.reference.id, p.query.id) for p in build_flood_pairs(m)]
    m.entries.reverse()
    p2 = [(p.reference.id, p.query.id) for p in build_flood_pairs(m)]
    assert p1 == p2 and len(p1) == 3
