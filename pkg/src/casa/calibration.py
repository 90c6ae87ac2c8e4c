"""Data-driven perturbation budgets with a DKW finite-sample correction.

Given per-image stain matrices and concentration maps from the training
centers, the angular budget ``tau_w`` and concentration budget ``tau_h`` are
empirical quantiles of the per-image deviations, taken at the inflated level
``1 - delta + epsilon_n``. The inflation makes the true ``(1 - delta)``
quantile of both statistics lie below the budget with probability at least
``1 - beta`` (the DKW bound at level ``beta / 2`` per statistic).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .errors import DegenerateMean, EmptyInput, EmptyMap, InvalidBeta
from .stain_core import check_stain_matrix, vector_angle


@dataclass(frozen=True)
class StainBudget:
    tau_w: float
    tau_h: float
    n: int = 0
    delta: float = float("nan")
    beta: float = float("nan")
    epsilon_n: float = float("nan")
    quantile_level: float = float("nan")

    def __post_init__(self):
        if not 0.0 <= self.tau_w <= math.pi:
            raise ValueError(f"tau_w={self.tau_w} outside [0, pi]")
        if not self.tau_h >= 0.0:
            raise ValueError(f"tau_h={self.tau_h} must be non-negative")

    @classmethod
    def fixed(cls, tau_w: float, tau_h: float) -> "StainBudget":
        """A budget set by hand, without calibration metadata."""
        return cls(tau_w=float(tau_w), tau_h=float(tau_h))

    def to_json(self) -> dict:
        d = asdict(self)
        return {
            "tau_w_rad": d["tau_w"],
            "tau_h": d["tau_h"],
            "n": d["n"],
            "delta": d["delta"],
            "beta": d["beta"],
            "epsilon_n": d["epsilon_n"],
            "quantile_level": d["quantile_level"],
        }

    @classmethod
    def from_json(cls, doc: dict) -> "StainBudget":
        return cls(
            tau_w=float(doc["tau_w_rad"]),
            tau_h=float(doc["tau_h"]),
            n=int(doc.get("n", 0)),
            delta=float(doc.get("delta", float("nan"))),
            beta=float(doc.get("beta", float("nan"))),
            epsilon_n=float(doc.get("epsilon_n", float("nan"))),
            quantile_level=float(doc.get("quantile_level", float("nan"))),
        )


@dataclass(frozen=True)
class ImageStainStats:
    image_id: str
    alpha: float
    r: tuple[float, float]

    @property
    def deviation(self) -> float:
        return max(abs(self.r[0] - 1.0), abs(self.r[1] - 1.0))


def dkw_epsilon(n: int, beta: float) -> float:
    """DKW half-width ``sqrt(ln(4 / beta) / (2 n))`` (two statistics, union bound)."""
    if not 0.0 < beta < 1.0:
        raise InvalidBeta(f"beta={beta} must lie in (0, 1)")
    if n < 1:
        raise EmptyInput("need at least one sample")
    return math.sqrt(math.log(4.0 / beta) / (2.0 * n))


def quantile_level(n: int, delta: float, beta: float) -> float:
    return min(1.0, 1.0 - delta + dkw_epsilon(n, beta))


def order_statistic_index(level: float, n: int) -> int:
    """0-based index of the ``ceil(level * n)``-th order statistic (level 0 -> minimum)."""
    # round away float noise such as 0.997 * 1000 = 997.0000000000001
    k = math.ceil(round(level * n, 9))
    return min(max(k, 1), n) - 1


def empirical_quantile(samples: Sequence[float], level: float) -> float:
    """``ceil(level * n)``-th smallest sample, no interpolation."""
    x = np.sort(np.asarray(samples, dtype=float).ravel())
    if x.size == 0:
        raise EmptyInput("empirical_quantile of an empty sample")
    if not 0.0 <= level <= 1.0:
        raise ValueError(f"level={level} outside [0, 1]")
    return float(x[order_statistic_index(level, x.size)])


def q99(h) -> np.ndarray:
    """Per-channel 99th percentile of a ``(2, n)`` concentration map."""
    h = np.asarray(h, dtype=float)
    if h.ndim != 2 or h.shape[1] == 0:
        raise EmptyMap("concentration map has no pixels")
    s = np.sort(h, axis=1)
    return s[:, order_statistic_index(0.99, h.shape[1])]


def mean_stain_matrix(matrices: Sequence) -> np.ndarray:
    if len(matrices) == 0:
        raise EmptyInput("no stain matrices")
    stack = np.stack([check_stain_matrix(w) for w in matrices])
    mean = stack.mean(axis=0)
    norms = np.linalg.norm(mean, axis=0)
    if np.any(norms < 1e-6):
        raise DegenerateMean("a mean stain column has (near) zero norm")
    return mean / norms


def angular_deviation(w, w_bar) -> float:
    """Largest per-column angle between two stain matrices."""
    w = np.asarray(w, dtype=float)
    w_bar = np.asarray(w_bar, dtype=float)
    return max(vector_angle(w[:, k], w_bar[:, k]) for k in range(2))


def concentration_ratio(h, corpus_q99) -> np.ndarray:
    corpus_q99 = np.asarray(corpus_q99, dtype=float)
    if np.any(corpus_q99 <= 0):
        raise ValueError("corpus q99 must be positive")
    return q99(h) / corpus_q99


def image_stats(matrices: Sequence, maps: Sequence, ids: Sequence[str] | None = None):
    """Per-image (alpha, r) relative to the corpus mean matrix and mean q99."""
    if len(matrices) != len(maps):
        raise ValueError("matrices and maps differ in length")
    if len(matrices) == 0:
        raise EmptyInput("empty corpus")
    ids = list(ids) if ids is not None else [str(i) for i in range(len(matrices))]
    w_bar = mean_stain_matrix(matrices)
    per_q = np.stack([q99(h) for h in maps])
    corpus_q = per_q.mean(axis=0)
    if np.any(corpus_q <= 0):
        raise EmptyMap("corpus q99 is zero for some stain; no stain present")
    return [
        ImageStainStats(
            image_id=i,
            alpha=angular_deviation(w, w_bar),
            r=(float(q[0] / corpus_q[0]), float(q[1] / corpus_q[1])),
        )
        for i, w, q in zip(ids, matrices, per_q)
    ]


def budget_from_stats(stats: Sequence[ImageStainStats], delta: float, beta: float) -> StainBudget:
    n = len(stats)
    if n == 0:
        raise EmptyInput("no image statistics")
    if not 0.0 < delta < 1.0:
        raise ValueError(f"delta={delta} must lie in (0, 1)")
    eps = dkw_epsilon(n, beta)
    level = min(1.0, 1.0 - delta + eps)
    return StainBudget(
        tau_w=empirical_quantile([s.alpha for s in stats], level),
        tau_h=empirical_quantile([s.deviation for s in stats], level),
        n=n,
        delta=float(delta),
        beta=float(beta),
        epsilon_n=eps,
        quantile_level=level,
    )


def calibrate(matrices: Sequence, maps: Sequence, delta: float = 0.05, beta: float = 0.05) -> StainBudget:
    """Budget from per-image stain matrices and concentration maps.

    >>> import numpy as np
    >>> from casa.stain_core import canonical_stain_matrix
    >>> w = canonical_stain_matrix()
    >>> h = np.linspace(0.1, 1.0, 200).reshape(2, 100)
    >>> b = calibrate([w, w], [h, h])
    >>> (b.tau_w, b.tau_h)
    (0.0, 0.0)
    """
    if len(matrices) < 2:
        raise EmptyInput("calibration needs at least two images")
    return budget_from_stats(image_stats(matrices, maps), delta, beta)
