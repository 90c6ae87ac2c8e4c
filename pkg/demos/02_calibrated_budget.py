"""
Calibrating a stain budget on the training centers
==================================================

Every training patch is decomposed; the per-image angular deviation from
the mean stain matrix and the concentration ratio give two samples whose
DKW-corrected quantiles form the budget (tau_W, tau_H).
"""

import math

import numpy as np

from casa.calibration import angular_deviation, calibrate, dkw_epsilon, image_stats, mean_stain_matrix
from casa.stain_core import macenko_decompose
from casa.synth_data import SynthConfig, generate_dataset

# the DKW correction shrinks like 1/sqrt(n)
for n in (100, 1000, 10_000):
    eps = dkw_epsilon(n, 0.05)
    print("n=%6d  eps=%.5f  quantile level=%.5f" % (n, eps, min(1.0, 0.95 + eps)))

ds = generate_dataset(SynthConfig(seed=0))
train = ds.split("train")
dec = [macenko_decompose(p.image) for p in train.patches]
mats, maps = [d[0] for d in dec], [d[1] for d in dec]

budget = calibrate(mats, maps, delta=0.05, beta=0.05)
print("\nn=%d  level=%.4f" % (budget.n, budget.quantile_level))
print("tau_W = %.4f rad (%.1f deg)" % (budget.tau_w, math.degrees(budget.tau_w)))
print("tau_H = %.4f" % budget.tau_h)

stats = image_stats(mats, maps)
alphas = np.array([s.alpha for s in stats])
print("alpha: median %.4f, max %.4f" % (np.median(alphas), alphas.max()))

# the held-out center was generated inside the calibrated cap
w_bar = mean_stain_matrix(mats)
alpha_ho = angular_deviation(ds.specs[2].w_true, w_bar)
print("held-out center alpha = %.4f rad (inside budget: %s)" % (alpha_ho, alpha_ho < budget.tau_w))
