"""
Backscatter weight maps
=======================

Each pixel of a dual-polarization patch gets a loss weight in ``[1, e]``:
dark, homogeneous areas (water, smooth ground) weigh up to ``e`` and the
brightest, speckle-dominated pixels weigh 1.
"""

import numpy as np

from sarw_mixmae import radiometry
from sarw_mixmae.synthetic import SyntheticSceneSpec, generate_synthetic_scene

# A synthetic scene: Voronoi regions with 4-look Gamma speckle, in dB.
scene = generate_synthetic_scene(SyntheticSceneSpec(size=128, seed=42))
patch = scene.patch
print(f"patch {patch.id}: {patch.height}x{patch.width}, "
      f"VV range {patch.vv_db.min():.1f} .. {patch.vv_db.max():.1f} dB")

# The pieces of the weight map: dB -> linear power, channel average,
# per-patch min-max scaling, then exp(1 - norm).
avg = radiometry.average_linear(radiometry.db_to_linear(patch.vh_db), radiometry.db_to_linear(patch.vv_db))
w = np.exp(1.0 - radiometry.min_max_normalize(avg))
assert np.array_equal(w, radiometry.compute_weight_map(patch))
print(f"weights: min {w.min():.4f}, max {w.max():.4f}, mean {w.mean():.4f}")

# Dark regions receive larger weights than bright ones.
for r in np.argsort(scene.region_vv_db):
    sel = scene.regions == r
    print(f"  region {r}: clean VV {scene.region_vv_db[r]:6.1f} dB -> mean weight {w[sel].mean():.3f}")

# A constant patch has nothing to normalize, so every weight is e.
flat = radiometry.SarPatch("flat", np.full((8, 8), -15.0), np.full((8, 8), -9.0))
print("constant patch weight:", radiometry.compute_weight_map(flat)[0, 0], "(e =", np.e, ")")
