"""K-step projected gradient ascent over stain perturbations.

The attack differentiates the model loss through the Beer-Lambert rendering
``I = i0 * exp(-W' h')`` with ``h' = h0 * (1 + delta_h)``. Stain columns move
along the normalized tangent component of their gradient and are projected
back onto their spherical caps; concentration offsets take sign steps and are
clamped into their box.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Protocol

import numpy as np

from .calibration import StainBudget
from .errors import DimensionMismatch
from .perturbation import (
    StainPerturbation,
    clamp_unit,
    perturbed_matrix,
    project_cap,
    project_delta_h,
    sample_random_perturbation,
    scaled_concentrations,
)
from .stain_core import MIN_COLUMN_ANGLE, vector_angle


class DifferentiableModel(Protocol):
    def loss(self, image, label) -> float: ...

    def input_gradient(self, image, label) -> np.ndarray: ...


@dataclass(frozen=True)
class PgdConfig:
    k_steps: int = 5
    step_w: float | None = None  # radians per step; default 2.5 * tau_w / k
    step_h: float | None = None  # default 2.5 * tau_h / k
    init: str = "zero"
    seed: int = 0

    def __post_init__(self):
        if self.k_steps < 0:
            raise ValueError("k_steps must be non-negative")
        if self.init not in ("zero", "random"):
            raise ValueError(f"unknown init {self.init!r}")
        for s in (self.step_w, self.step_h):
            if s is not None and not s > 0:
                raise ValueError("step sizes must be positive")

    def step_sizes(self, budget: StainBudget) -> tuple[float, float]:
        k = max(self.k_steps, 1)
        step_w = self.step_w if self.step_w is not None else 2.5 * budget.tau_w / k
        step_h = self.step_h if self.step_h is not None else 2.5 * budget.tau_h / k
        return step_w, step_h


@dataclass
class AttackResult:
    perturbation: StainPerturbation
    loss_trajectory: list[float]
    adversarial_image: np.ndarray
    best_step: int = 0
    iterates: list[StainPerturbation] = field(default_factory=list, repr=False)

    def to_json(self) -> dict:
        return {
            "perturbation": self.perturbation.to_json(),
            "loss_trajectory": list(self.loss_trajectory),
            "best_step": self.best_step,
        }


def render_unclamped(w_ref, h0, pert: StainPerturbation, i0: float = 1.0, anchor=None) -> np.ndarray:
    """``(n, 3)`` intensities of the perturbed image before clamping to [0, 1].

    See ``perturbation.apply_perturbation`` for the meaning of ``anchor``.
    """
    w_p = perturbed_matrix(w_ref, pert.delta_w)
    h_p = scaled_concentrations(h0, pert.delta_h)
    if anchor is None:
        return i0 * np.exp(-(w_p @ h_p).T)
    offset = (w_p @ h_p - np.asarray(w_ref, dtype=float) @ np.asarray(h0, dtype=float)).T
    return np.asarray(anchor, dtype=float).reshape(-1, 3) * np.exp(-offset)


def grad_wrt_perturbation(input_grad, w_pert, h0, delta_h, i0: float = 1.0, rendered=None):
    """Chain rule from an image gradient to ``(dL/dW', dL/d delta_h)``.

    ``rendered`` are the unclamped ``(n, 3)`` intensities the gradient was
    taken at; by default they are recomputed as ``i0 * exp(-W' h')``. Pixels
    whose unclamped value left [0, 1] contribute nothing.
    """
    w_pert = np.asarray(w_pert, dtype=float)
    h0 = np.asarray(h0, dtype=float)
    h_p = scaled_concentrations(h0, delta_h)
    n = h0.shape[1]
    g = np.asarray(input_grad, dtype=float)
    if g.size != 3 * n or w_pert.shape != (3, 2):
        raise DimensionMismatch(f"gradient of size {g.size} does not match {n} pixels")
    g = g.reshape(n, 3)
    if rendered is None:
        rendered = i0 * np.exp(-(w_pert @ h_p).T)
    rendered = np.asarray(rendered, dtype=float).reshape(n, 3)
    active = (rendered >= 0.0) & (rendered <= 1.0)
    gi = np.where(active, -g * rendered, 0.0)  # dL/d(OD) per pixel and channel
    d_w = gi.T @ h_p.T
    d_h = ((gi @ w_pert) * h0.T).sum(axis=0)
    return d_w, d_h


def _loss_and_grad(model, image, label):
    fn = getattr(model, "loss_and_input_gradient", None)
    if fn is not None:
        return fn(image, label)
    return model.loss(image, label), model.input_gradient(image, label)


def finite_diff_grad(model, w_ref, h0, delta: StainPerturbation, label, i0: float,
                     width: int, height: int, fd_step: float = 1e-5):
    """Central differences of the loss in each ambient component of ``delta``.

    Normalization, cap projection and pixel clamping are all bypassed: the
    rendered image is ``i0 * exp(-(w_ref + delta_w) h0 (1 + delta_h))``.
    """
    if not fd_step > 0:
        raise ValueError("fd_step must be positive")
    w_ref = np.asarray(w_ref, dtype=float)
    h0 = np.asarray(h0, dtype=float)

    def loss_at(dw, dh):
        od = ((w_ref + dw) @ scaled_concentrations(h0, dh)).T
        return model.loss((i0 * np.exp(-od)).reshape(height, width, 3), label)

    dw0 = np.array(delta.delta_w, dtype=float)
    dh0 = np.array(delta.delta_h, dtype=float)
    g_w = np.zeros((3, 2))
    for idx in np.ndindex(3, 2):
        e = np.zeros((3, 2))
        e[idx] = fd_step
        g_w[idx] = (loss_at(dw0 + e, dh0) - loss_at(dw0 - e, dh0)) / (2 * fd_step)
    g_h = np.zeros(2)
    for k in range(2):
        e = np.zeros(2)
        e[k] = fd_step
        g_h[k] = (loss_at(dw0, dh0 + e) - loss_at(dw0, dh0 - e)) / (2 * fd_step)
    return g_w, g_h


def pgd_attack(model, w_ref, h0, label, budget: StainBudget, config: PgdConfig | None = None,
               i0: float = 1.0, width: int | None = None, height: int | None = None,
               anchor=None) -> AttackResult:
    """Worst-case stain perturbation within ``budget`` by K-step PGD.

    Returns the iterate with the highest loss seen (initial point included),
    so with zero initialization the adversarial loss is never below the
    clean one. ``anchor`` renders perturbations on top of the original image
    instead of the pure reconstruction (see ``apply_perturbation``).
    """
    config = config or PgdConfig()
    w_ref = np.asarray(w_ref, dtype=float)
    h0 = np.asarray(h0, dtype=float)
    if anchor is not None:
        height, width = np.asarray(anchor).shape[:2]
    if width is None or height is None:
        raise DimensionMismatch("image dimensions are required")
    if width * height != h0.shape[1]:
        raise DimensionMismatch(f"{h0.shape[1]} pixels do not fill {height}x{width}")
    step_w, step_h = config.step_sizes(budget)

    if config.init == "random":
        rng = np.random.default_rng(config.seed)
        start = sample_random_perturbation(budget, rng, w_ref)
        cols = perturbed_matrix(w_ref, start.delta_w)
        dh = start.delta_h
    else:
        cols = w_ref.copy()
        dh = np.zeros(2)
    dh = project_delta_h(dh, budget.tau_h)

    def as_perturbation(cols, dh):
        # columns equal to the reference give an exactly-zero offset
        return StainPerturbation(np.where(cols == w_ref, 0.0, cols - w_ref), dh.copy())

    def evaluate(pert):
        raw = render_unclamped(w_ref, h0, pert, i0, anchor)
        image = np.clip(raw, 0.0, 1.0).reshape(height, width, 3)
        loss, grad = _loss_and_grad(model, image, label)
        return float(loss), grad, raw, image

    pert = as_perturbation(cols, dh)
    loss, grad, raw, image = evaluate(pert)
    trajectory = [loss]
    iterates = [pert]
    best = (loss, 0, image)

    for step in range(config.k_steps):
        w_cur = perturbed_matrix(w_ref, pert.delta_w)
        d_w, d_h = grad_wrt_perturbation(grad, w_cur, h0, dh, i0, rendered=raw)
        new_cols = w_cur.copy()
        for k in range(2):
            c = w_cur[:, k]
            tangent = d_w[:, k] - (d_w[:, k] @ c) * c
            norm = np.linalg.norm(tangent)
            if step_w > 0 and norm > 0:
                v = c + step_w * tangent / norm
                v = project_cap(w_ref[:, k], v / np.linalg.norm(v), budget.tau_w)
                new_cols[:, k] = clamp_unit(v)
        if vector_angle(new_cols[:, 0], new_cols[:, 1]) < MIN_COLUMN_ANGLE:
            # both caps reach each other; refuse a step that merges the stains
            new_cols = w_cur
        dh = project_delta_h(dh + step_h * np.sign(d_h), budget.tau_h)
        pert = as_perturbation(new_cols, dh)
        loss, grad, raw, image = evaluate(pert)
        trajectory.append(loss)
        iterates.append(pert)
        if loss > best[0]:
            best = (loss, step + 1, image)

    _, best_step, best_image = best
    chosen = iterates[best_step]
    final = StainPerturbation(chosen.delta_w, project_delta_h(chosen.delta_h, budget.tau_h, final=True))
    return AttackResult(final, trajectory, best_image, best_step, iterates)
