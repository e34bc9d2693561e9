"""
Mixing two patches
==================

Pretraining input is a mix of two patches on a 4x4 grid of 32-pixel units.
Each source is reconstructed where it is hidden, and the loss weight at
a pixel is the weight of the source being reconstructed there.
"""

import numpy as np

from sarw_mixmae import masking

rng = np.random.default_rng(0)
mask = masking.sample_mask(4, 0.5, rng)
print("unit grid (0 shows a, 1 shows b):\n", mask.unit_grid)

a = np.zeros((2, 128, 128))
b = np.ones((2, 128, 128))
sample = masking.mix(a, b, mask, weight_a=np.full((128, 128), 1.5), weight_b=np.full((128, 128), 2.5))
print("fraction of pixels taken from b:", sample.mixed_input.mean())

# Weights follow the hidden source: b's weight where a is shown and vice versa.
routed = masking.route_weights(sample)
print("routed weight at a unit showing a:", routed[~mask.pixels().astype(bool)][0])
print("routed weight at a unit showing b:", routed[mask.pixels().astype(bool)][0])

# Swapping the sources and complementing the mask gives the same input.
swapped = masking.mix(b, a, mask.complement())
print("involution holds:", np.array_equal(swapped.mixed_input, sample.mixed_input))

# The encoder sees the mask at every stage's token resolution.
for stride in (4, 8, 16, 32):
    print(f"stride {stride:2d}: token mask {masking.downsample_mask(mask, stride).shape}")
