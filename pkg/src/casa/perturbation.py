"""Stain perturbations, their Beer-Lambert rendering, and feasible-set projections.

A perturbation is a pair ``(delta_w, delta_h)``:

* ``delta_w`` (3x2) is an ambient offset to the reference stain columns; the
  perturbed column is ``normalize(w_ref[:, k] + delta_w[:, k])`` and is
  feasible when it lies within a spherical cap of half-angle ``tau_w``
  around ``w_ref[:, k]``.
* ``delta_h`` (2,) scales each stain's concentration by ``1 + delta_h[k]``
  for every pixel of the image; feasible when ``|delta_h[k]| <= tau_h`` and
  ``delta_h[k] >= -1 + EPS_H``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .calibration import StainBudget
from .errors import Antipodal, DegenerateStains, NullColumn
from .stain_core import MIN_COLUMN_ANGLE, reconstruct, vector_angle

EPS_H = 1e-3


@dataclass(frozen=True)
class StainPerturbation:
    delta_w: np.ndarray = field(default_factory=lambda: np.zeros((3, 2)))
    delta_h: np.ndarray = field(default_factory=lambda: np.zeros(2))

    def __post_init__(self):
        object.__setattr__(self, "delta_w", np.asarray(self.delta_w, dtype=float).reshape(3, 2))
        object.__setattr__(self, "delta_h", np.asarray(self.delta_h, dtype=float).reshape(2))

    @classmethod
    def zero(cls) -> "StainPerturbation":
        return cls()

    @property
    def is_zero(self) -> bool:
        return not (np.any(self.delta_w) or np.any(self.delta_h))

    def column_angles(self, w_ref) -> np.ndarray:
        w_p = perturbed_matrix(w_ref, self.delta_w)
        w_ref = np.asarray(w_ref, dtype=float)
        return np.array([vector_angle(w_p[:, k], w_ref[:, k]) for k in range(2)])

    def feasible(self, w_ref, budget: StainBudget) -> bool:
        try:
            angles = self.column_angles(w_ref)
        except (NullColumn, DegenerateStains):
            return False
        return bool(
            np.all(angles <= budget.tau_w + 1e-9)
            and np.all(np.abs(self.delta_h) <= budget.tau_h + 1e-12)
            and np.all(self.delta_h >= -1.0 + EPS_H - 1e-15)
        )

    def to_json(self) -> dict:
        return {"delta_w": self.delta_w.tolist(), "delta_h": self.delta_h.tolist()}

    @classmethod
    def from_json(cls, doc: dict) -> "StainPerturbation":
        return cls(np.array(doc["delta_w"], dtype=float), np.array(doc["delta_h"], dtype=float))


def clamp_unit(v: np.ndarray) -> np.ndarray:
    """Clamp negative components of a unit vector to zero and renormalize.

    Returns ``v`` itself when nothing is clamped. For a non-negative reference
    column the clamp never increases the angle to it, so cap feasibility is
    preserved.
    """
    if np.all(v >= 0.0):
        return v
    v = np.maximum(v, 0.0)
    norm = np.linalg.norm(v)
    if norm < 1e-9:
        raise NullColumn("column vanished after non-negativity clamp")
    return v / norm


def perturbed_matrix(w_ref, delta_w) -> np.ndarray:
    """Columns ``normalize(w_ref_k + delta_w_k)``, clamped to be non-negative.

    Columns with an exactly-zero offset are returned bit-for-bit unchanged.
    """
    w_ref = np.asarray(w_ref, dtype=float)
    delta_w = np.asarray(delta_w, dtype=float)
    out = w_ref.copy()
    for k in range(2):
        if not np.any(delta_w[:, k]):
            continue
        v = w_ref[:, k] + delta_w[:, k]
        norm = np.linalg.norm(v)
        if norm < 1e-9:
            raise NullColumn(f"column {k} of w_ref + delta_w is null")
        out[:, k] = clamp_unit(v / norm)
    if vector_angle(out[:, 0], out[:, 1]) < MIN_COLUMN_ANGLE:
        raise DegenerateStains("perturbed stain columns are parallel")
    return out


def project_cap(w_ref_col, v, tau_w: float) -> np.ndarray:
    """Geodesic projection of unit ``v`` onto the cap of half-angle ``tau_w`` around ``w_ref_col``."""
    w_ref_col = np.asarray(w_ref_col, dtype=float)
    v = np.asarray(v, dtype=float)
    theta = vector_angle(v, w_ref_col)
    if theta <= tau_w + 1e-12:
        return v
    if theta > math.pi - 1e-6:
        raise Antipodal("direction to project is antipodal to the reference")
    out = (math.sin(theta - tau_w) * w_ref_col + math.sin(tau_w) * v) / math.sin(theta)
    return out / np.linalg.norm(out)


def project_delta_h(delta_h, tau_h: float, final: bool = False) -> np.ndarray:
    """Clamp concentration offsets into ``[max(-tau_h, -1 + EPS_H), tau_h]``.

    Intermediate and final iterates use the same box; the ``-1 + EPS_H``
    floor only binds when ``tau_h >= 1 - EPS_H`` and keeps every scale
    factor ``1 + delta_h`` strictly positive.
    """
    del final  # both modes share the same box
    lower = max(-tau_h, -1.0 + EPS_H)
    return np.clip(np.asarray(delta_h, dtype=float), lower, tau_h)


def scaled_concentrations(h0, delta_h) -> np.ndarray:
    return np.asarray(h0, dtype=float) * (1.0 + np.asarray(delta_h, dtype=float))[:, None]


def apply_perturbation(w_ref, h0, pert: StainPerturbation, i0: float, width: int, height: int,
                       anchor=None) -> np.ndarray:
    """Render the perturbed image.

    Without ``anchor`` this is the pure Beer-Lambert reconstruction
    ``i0 * exp(-(w') h')``. With ``anchor`` (the original image) the
    perturbation is applied as an OD offset on top of it,
    ``anchor * exp(-(w' h' - w_ref h0))``, so the residual of the
    decomposition is preserved and a zero perturbation returns ``anchor``
    exactly.
    """
    w_p = perturbed_matrix(w_ref, pert.delta_w)
    h_p = scaled_concentrations(h0, pert.delta_h)
    if anchor is None:
        return reconstruct(w_p, h_p, i0, width, height)
    anchor = np.asarray(anchor, dtype=float)
    offset = (w_p @ h_p - np.asarray(w_ref, dtype=float) @ np.asarray(h0, dtype=float)).T
    return np.clip(anchor * np.exp(-offset).reshape(anchor.shape), 0.0, 1.0)


def rotate_toward(col: np.ndarray, tangent: np.ndarray, angle: float) -> np.ndarray:
    """Rotate unit ``col`` by ``angle`` toward the unit ``tangent`` (orthogonal to it)."""
    return math.cos(angle) * col + math.sin(angle) * tangent


def random_tangent(col: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    while True:
        g = rng.standard_normal(3)
        t = g - (g @ col) * col
        norm = np.linalg.norm(t)
        if norm > 1e-8:
            return t / norm


def sample_random_perturbation(budget: StainBudget, rng: np.random.Generator, w_ref) -> StainPerturbation:
    """Uniform random feasible perturbation.

    Each column is rotated by an angle drawn from ``U[0, tau_w]`` toward a
    uniformly random tangent direction; each concentration offset is drawn
    from ``U[-min(tau_h, 1 - EPS_H), tau_h]``.
    """
    w_ref = np.asarray(w_ref, dtype=float)
    delta_w = np.zeros((3, 2))
    cols = w_ref.copy()
    for k in range(2):
        col = w_ref[:, k]
        angle = rng.uniform(0.0, budget.tau_w)
        cols[:, k] = clamp_unit(rotate_toward(col, random_tangent(col, rng), angle))
        delta_w[:, k] = cols[:, k] - col
    if vector_angle(cols[:, 0], cols[:, 1]) < MIN_COLUMN_ANGLE:
        # the two caps overlap and the draw merged the stains; keep the reference directions
        delta_w[:] = 0.0
    lo = -min(budget.tau_h, 1.0 - EPS_H)
    delta_h = rng.uniform(lo, budget.tau_h, size=2)
    return StainPerturbation(delta_w, delta_h)
