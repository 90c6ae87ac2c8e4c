"""
Stain decomposition of a synthetic H&E-like patch
=================================================

A patch is rendered from a known stain matrix with the Beer-Lambert model,
then the Macenko estimate is compared with the truth and the patch is
rebuilt from the recovered matrix and concentrations.
"""

import math

import numpy as np

from casa.stain_core import canonical_stain_matrix, macenko_decompose, reconstruct, rgb_to_od, vector_angle
from casa.synth_data import SynthConfig, generate_dataset

# one small dataset; patch 1 of the first center has tumor-like blobs (label 1)
ds = generate_dataset(SynthConfig(train_patches_per_class=2, heldout_patches_per_class=1, seed=0))
patch = ds.patches[1]
print("label", patch.label, "center", patch.center_id, "image", patch.image.shape)

# optical density is linear in the concentrations
od = rgb_to_od(patch.image)
print("OD range %.3f .. %.3f" % (od.min(), od.max()))

w, h = macenko_decompose(patch.image)
print("true W\n", np.round(patch.w_true, 4))
print("Macenko W\n", np.round(w, 4))
for k, name in enumerate("HE"):
    print("%s column error: %.3f deg" % (name, math.degrees(vector_angle(w[:, k], patch.w_true[:, k]))))

# the center's stains are rotated away from the canonical reference
ref = canonical_stain_matrix()
print("center rotation vs reference: %.3f rad" % max(vector_angle(patch.w_true[:, k], ref[:, k]) for k in range(2)))

rebuilt = reconstruct(w, h, 1.0, 32, 32)
print("max reconstruction error (8-bit units): %.2f" % (255 * np.abs(rebuilt - patch.image).max()))
