import math

import numpy as np
import pytest

from casa.adversary import PgdConfig, finite_diff_grad, grad_wrt_perturbation, pgd_attack
from casa.calibration import StainBudget
from casa.errors import DimensionMismatch
from casa.perturbation import (
    EPS_H,
    StainPerturbation,
    apply_perturbation,
    perturbed_matrix,
    sample_random_perturbation,
)
from casa.toy_model import MlpClassifier

from conftest import stain_matrix_with_separation


class LinearLoss:
    """Loss ``sum(g * image)`` with a fixed per-channel weight ``g``."""

    def __init__(self, g):
        self.g = np.asarray(g, dtype=float)

    def loss(self, image, label):
        return float(np.sum(np.asarray(image) * self.g))

    def input_gradient(self, image, label):
        return np.broadcast_to(self.g, np.shape(image)).copy()


class ZeroLoss:
    def loss(self, image, label):
        return 0.0

    def input_gradient(self, image, label):
        return np.zeros(np.shape(image))


def rel_err(a, b, floor=1e-7):
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def _instance(seed, side=8):
    rng = np.random.default_rng(seed)
    w = stain_matrix_with_separation(rng.uniform(0.3, 0.6), rng)
    h0 = rng.uniform(0.05, 1.5, size=(2, side * side))
    return rng, w, h0


def _analytic(model, w_ref, h0, pert, label, side):
    w_p = np.asarray(w_ref) + pert.delta_w
    h_p = h0 * (1 + np.asarray(pert.delta_h))[:, None]
    image = np.exp(-(w_p @ h_p).T).reshape(side, side, 3)
    return grad_wrt_perturbation(model.input_gradient(image, label), w_p, h0, pert.delta_h)


# ---------------------------------------------------------------- gradients

def test_gradient_zero_cases(w25):
    h0 = np.random.default_rng(0).uniform(0, 1, size=(2, 16))
    d_w, d_h = grad_wrt_perturbation(np.zeros((4, 4, 3)), w25, h0, [0.1, -0.2])
    assert np.all(d_w == 0) and np.all(d_h == 0)
    d_w, d_h = grad_wrt_perturbation(np.ones((4, 4, 3)), w25, np.zeros((2, 16)), [0.1, -0.2])
    assert np.all(d_w == 0) and np.all(d_h == 0)


def test_gradient_dimension_mismatch(w25):
    with pytest.raises(DimensionMismatch):
        grad_wrt_perturbation(np.ones((4, 4, 3)), w25, np.ones((2, 15)), [0, 0])


@pytest.mark.parametrize("seed", range(5))
def test_gradient_matches_finite_differences(seed):
    rng, w, h0 = _instance(seed)
    model = MlpClassifier.init(seed=seed)
    pert = StainPerturbation(rng.uniform(0, 0.05, size=(3, 2)), rng.uniform(-0.3, 0.3, 2))
    label = int(rng.integers(2))
    d_w, d_h = _analytic(model, w, h0, pert, label, 8)
    f_w, f_h = finite_diff_grad(model, w, h0, pert, label, 1.0, 8, 8)
    assert np.all(rel_err(d_w, f_w) <= 1e-4)
    assert np.all(rel_err(d_h, f_h) <= 1e-4)


def test_finite_difference_of_constant_loss_is_zero(w25):
    h0 = np.ones((2, 4))
    f_w, f_h = finite_diff_grad(ZeroLoss(), w25, h0, StainPerturbation.zero(), 0, 1.0, 2, 2)
    assert np.all(f_w == 0) and np.all(f_h == 0)


def test_finite_difference_second_order_convergence():
    _, w, h0 = _instance(1, side=4)
    model = LinearLoss([0.7, -1.1, 0.4])
    pert = StainPerturbation.zero()
    d_w, d_h = _analytic(model, w, h0, pert, 0, 4)
    errs = []
    for step in (1e-2, 5e-3):
        f_w, f_h = finite_diff_grad(model, w, h0, pert, 0, 1.0, 4, 4, fd_step=step)
        errs.append(np.linalg.norm(np.concatenate([(f_w - d_w).ravel(), f_h - d_h])))
    assert 3.5 <= errs[0] / errs[1] <= 4.5


def test_finite_difference_rejects_bad_step(w25):
    with pytest.raises(ValueError):
        finite_diff_grad(ZeroLoss(), w25, np.ones((2, 1)), StainPerturbation.zero(), 0, 1.0, 1, 1, fd_step=0)


# ---------------------------------------------------------------- PGD

def test_zero_budget_gives_zero_perturbation():
    _, w, h0 = _instance(2)
    res = pgd_attack(MlpClassifier.init(seed=2), w, h0, 1, StainBudget.fixed(0, 0), width=8, height=8)
    assert res.perturbation.is_zero
    assert len(set(res.loss_trajectory)) == 1 and len(res.loss_trajectory) == 6


def test_zero_steps_returns_initialization():
    _, w, h0 = _instance(3)
    model = MlpClassifier.init(seed=3)
    res = pgd_attack(model, w, h0, 0, StainBudget.fixed(0.2, 0.3), PgdConfig(k_steps=0), width=8, height=8)
    assert res.loss_trajectory == [model.loss(apply_perturbation(w, h0, StainPerturbation.zero(), 1.0, 8, 8), 0)]
    assert res.perturbation.is_zero


@pytest.mark.parametrize("g", [[-1.0, -0.5, -2.0], [0.3, 1.0, 0.8], [-0.2, -1.5, -0.1]])
def test_single_pixel_linear_matches_grid_search(w_canon, g):
    model = LinearLoss(g)
    h0 = np.array([[0.8], [0.5]])
    tau_h = 0.6
    budget = StainBudget.fixed(0.0, tau_h)
    res = pgd_attack(model, w_canon, h0, 0, budget, width=1, height=1)
    grid = np.linspace(max(-tau_h, -1 + EPS_H), tau_h, 100)
    best = -math.inf
    for a in grid:
        for b in grid:
            img = apply_perturbation(w_canon, h0, StainPerturbation(np.zeros((3, 2)), [a, b]), 1.0, 1, 1)
            best = max(best, model.loss(img, 0))
    attained = max(res.loss_trajectory)
    assert attained >= best - 0.01 * abs(best)
    assert np.all(np.abs(res.perturbation.delta_h) <= tau_h)


def test_every_iterate_is_feasible():
    budget = StainBudget.fixed(0.25, 0.4)
    for seed in range(5):
        _, w, h0 = _instance(seed)
        for init in ("zero", "random"):
            res = pgd_attack(MlpClassifier.init(seed=seed), w, h0, seed % 2, budget,
                             PgdConfig(init=init, seed=seed), width=8, height=8)
            assert len(res.iterates) == 6
            for it in res.iterates + [res.perturbation]:
                assert it.feasible(w, budget)
            assert res.perturbation.column_angles(w).max() <= 0.25 + 1e-9


def test_best_iterate_dominates_clean_and_random():
    budget = StainBudget.fixed(0.25, 0.4)
    wins = 0
    for seed in range(40):
        rng, w, h0 = _instance(seed)
        model = MlpClassifier.init(seed=seed)
        label = seed % 2
        res = pgd_attack(model, w, h0, label, budget, width=8, height=8)
        clean = model.loss(apply_perturbation(w, h0, StainPerturbation.zero(), 1.0, 8, 8), label)
        rand = model.loss(apply_perturbation(w, h0, sample_random_perturbation(budget, rng, w), 1.0, 8, 8), label)
        adv = model.loss(res.adversarial_image, label)
        assert adv >= clean
        assert adv == res.loss_trajectory[res.best_step]
        wins += adv > rand
    assert wins >= 38


def test_attack_is_deterministic():
    _, w, h0 = _instance(4)
    model = MlpClassifier.init(seed=4)
    cfg = PgdConfig(init="random", seed=9)
    a = pgd_attack(model, w, h0, 1, StainBudget.fixed(0.2, 0.3), cfg, width=8, height=8)
    b = pgd_attack(model, w, h0, 1, StainBudget.fixed(0.2, 0.3), cfg, width=8, height=8)
    assert a.loss_trajectory == b.loss_trajectory
    assert np.array_equal(a.adversarial_image, b.adversarial_image)


def test_anchor_rendering_starts_at_anchor():
    rng, w, h0 = _instance(5)
    anchor = rng.uniform(0.2, 1.0, size=(8, 8, 3))
    model = MlpClassifier.init(seed=5)
    res = pgd_attack(model, w, h0, 0, StainBudget.fixed(0.2, 0.3), anchor=anchor)
    assert res.loss_trajectory[0] == model.loss(anchor, 0)
    assert res.adversarial_image.shape == anchor.shape


def test_unit_columns_after_attack():
    _, w, h0 = _instance(6)
    res = pgd_attack(MlpClassifier.init(seed=6), w, h0, 1, StainBudget.fixed(0.3, 0.3), width=8, height=8)
    w_adv = perturbed_matrix(w, res.perturbation.delta_w)
    np.testing.assert_allclose(np.linalg.norm(w_adv, axis=0), 1.0, atol=1e-12)
    assert np.all(w_adv >= 0)


def test_config_validation():
    with pytest.raises(ValueError):
        PgdConfig(k_steps=-1)
    with pytest.raises(ValueError):
        PgdConfig(step_w=0.0)
    with pytest.raises(ValueError):
        PgdConfig(init="orthogonal")
