"""
Worst-case stain perturbations and min-max training
===================================================

First a single PGD attack on one patch, then the held-out-center
comparison of ERM, random stain augmentation and CASA. Pass a number of
seeds on the command line (default 1; the acceptance suite uses 5).
"""

import sys

import numpy as np

from casa.adversary import PgdConfig, pgd_attack
from casa.experiment import calibrate_dataset, compare_methods, mean_heldout_accuracy
from casa.perturbation import apply_perturbation, sample_random_perturbation
from casa.stain_core import macenko_decompose
from casa.synth_data import SynthConfig, generate_dataset
from casa.toy_model import MlpClassifier, TrainConfig
from casa.trainer import train_erm

ds = generate_dataset(SynthConfig(seed=0))
train = ds.split("train")
budget, _ = calibrate_dataset(train)
model, _ = train_erm(train, MlpClassifier.init(0), TrainConfig(epochs=3, seed=0))

# one attack: the loss trajectory has K + 1 entries, the best iterate is kept
patch = train.patches[5]
w, h0 = macenko_decompose(patch.image)
res = pgd_attack(model, w, h0, patch.label, budget, PgdConfig(k_steps=5), anchor=patch.image)
print("loss trajectory", np.round(res.loss_trajectory, 4), "best step", res.best_step)
rng = np.random.default_rng(0)
rand = [model.loss(apply_perturbation(w, h0, sample_random_perturbation(budget, rng, w), 1.0, 32, 32,
                                      anchor=patch.image), patch.label) for _ in range(20)]
print("random perturbations: mean loss %.4f, max %.4f" % (np.mean(rand), np.max(rand)))
print("column angles of the attack", np.round(res.perturbation.column_angles(w), 4), "cap", round(budget.tau_w, 4))
print("delta_h", np.round(res.perturbation.delta_h, 4), "box", round(budget.tau_h, 4))

n_seeds = int(sys.argv[1]) if len(sys.argv) > 1 else 1
results = compare_methods(range(n_seeds))
for r in results:
    print("seed %d  alpha_heldout=%.3f tau_W=%.3f  " % (r.seed, r.heldout_alpha, r.budget.tau_w)
          + "  ".join("%s %.3f" % (m, rep.acc_avg) for m, rep in r.heldout.items()))
print("mean held-out acc_avg", {m: round(v, 3) for m, v in mean_heldout_accuracy(results).items()})
