import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sarw_mixmae.errors import RadiometryError, ShapeError
from sarw_mixmae.radiometry import (
    SarPatch,
    average_linear,
    compute_weight_map,
    db_to_linear,
    linear_to_db,
    min_max_normalize,
    weight_map_from_db,
)


def scalar_weight_map(vh_db, vv_db):
    """Straight-line reference: nested loops over Python floats."""
    h, w = len(vh_db), len(vh_db[0])
    avg = [[(10 ** (vh_db[i][j] / 10) + 10 ** (vv_db[i][j] / 10)) / 2 for j in range(w)] for i in range(h)]
    flat = [a for row in avg for a in row]
    lo, hi = min(flat), max(flat)
    out = []
    for i in range(h):
        row = []
        for j in range(w):
            n = 0.0 if hi == lo else (avg[i][j] - lo) / (hi - lo)
            row.append(math.exp(1.0 - n))
        out.append(row)
    return np.array(out)


def test_db_to_linear_examples():
    assert db_to_linear(0.0) == 1.0
    assert db_to_linear(-10.0) == 0.1
    # 10**0.3 to 30 digits (mpmath): 1.99526231496887960135...
    assert db_to_linear(3.0) == pytest.approx(1.9952623149688796, rel=1e-15)


def test_linear_to_db_examples():
    assert linear_to_db(1.0) == 0.0
    assert linear_to_db(0.1) == pytest.approx(-10.0, abs=1e-12)
    # 10*log10(2) = 3.01029995663981195...
    assert linear_to_db(2.0) == pytest.approx(3.0102999566398120, rel=1e-14)


def test_non_finite_rejected_with_index():
    grid = np.zeros((3, 3))
    grid[1, 2] = np.nan
    with pytest.raises(RadiometryError, match=r"\(1, 2\)"):
        db_to_linear(grid)


def test_nonpositive_power_rejected():
    with pytest.raises(RadiometryError):
        linear_to_db(np.array([1.0, 0.0]))
    with pytest.raises(RadiometryError):
        linear_to_db(-2.0)


def test_average_linear():
    x = np.array([[0.3, 2.0]])
    np.testing.assert_array_equal(average_linear(x, x), x)
    assert average_linear(0.2, 0.4) == pytest.approx(0.3, abs=1e-16)
    with pytest.raises(ShapeError):
        average_linear(np.ones((2, 2)), np.ones((2, 3)))


def test_average_linear_matches_loop(rng):
    vh, vv = rng.uniform(1e-5, 10, (5, 7)), rng.uniform(1e-5, 10, (5, 7))
    ref = np.array([[(vh[i, j] + vv[i, j]) / 2 for j in range(7)] for i in range(5)])
    np.testing.assert_array_equal(average_linear(vh, vv), ref)


def test_min_max_normalize():
    np.testing.assert_array_equal(min_max_normalize([0.2, 0.7]), [0.0, 1.0])
    np.testing.assert_array_equal(min_max_normalize(np.full((3, 3), 4.2)), np.zeros((3, 3)))
    np.testing.assert_allclose(min_max_normalize([1.0, 2.0, 3.0]), [0.0, 0.5, 1.0])


def test_weight_map_constant_patch():
    for level in (-40.0, -12.5, 3.0):
        p = SarPatch("c", np.full((4, 4), level), np.full((4, 4), level))
        np.testing.assert_array_equal(compute_weight_map(p), np.full((4, 4), math.e))


def test_weight_map_two_pixels():
    # average linear powers 0.2 and 0.7, each from equal VH/VV
    db = 10 * np.log10(np.array([[0.2, 0.7]]))
    w = weight_map_from_db(db, db)
    assert w[0, 0] == math.e
    assert w[0, 1] == 1.0


def test_weight_map_matches_scalar_oracle(rng):
    vh = rng.uniform(-50, 10, (4, 4))
    vv = rng.uniform(-50, 10, (4, 4))
    np.testing.assert_allclose(weight_map_from_db(vh, vv), scalar_weight_map(vh.tolist(), vv.tolist()), rtol=1e-12)


def test_extremal_ratio():
    assert math.exp(1 - 0) / math.exp(1 - 1) == pytest.approx(math.e, rel=1e-15)


db_grids = arrays(np.float64, (6, 6), elements=st.floats(-50, 10))


@settings(max_examples=60, deadline=None)
@given(db_grids, db_grids)
def test_weight_range_endpoints_and_antitonicity(vh, vv):
    w = weight_map_from_db(vh, vv)
    avg = average_linear(db_to_linear(vh), db_to_linear(vv))
    assert (w >= 1.0).all() and (w <= math.e).all()
    if avg.max() > avg.min():
        assert w.min() == 1.0 and w.max() == math.e
    a, ww = avg.ravel(), w.ravel()
    le = a[:, None] <= a[None, :]
    ge = ww[:, None] >= ww[None, :]
    assert np.array_equal(le, ge)


@settings(max_examples=40, deadline=None)
@given(db_grids, db_grids, st.floats(1e-3, 1e3))
def test_positive_scaling_leaves_weights_unchanged(vh, vv, c):
    lin_vh, lin_vv = db_to_linear(vh), db_to_linear(vv)
    base = np.exp(1 - min_max_normalize(average_linear(lin_vh, lin_vv)))
    scaled = np.exp(1 - min_max_normalize(average_linear(c * lin_vh, c * lin_vv)))
    np.testing.assert_allclose(scaled, base, rtol=1e-9, atol=1e-9)


def test_round_trip_over_clamp_range():
    x = np.linspace(-50, 10, 10_001)
    back = linear_to_db(db_to_linear(x))
    np.testing.assert_allclose(back, x, rtol=1e-9, atol=1e-12)


def test_patch_shape_mismatch():
    with pytest.raises(ShapeError):
        SarPatch("bad", np.zeros((2, 2)), np.zeros((2, 3)))
