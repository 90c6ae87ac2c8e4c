"""Beer-Lambert stain model: RGB <-> optical density, Macenko estimation,
least-squares concentrations and reconstruction.

Conventions used throughout the package:

* an RGB image is a float64 array of shape ``(height, width, 3)`` with
  intensities in ``[0, 1]``; the background intensity ``i0`` travels
  separately (default 1.0);
* a stain matrix ``w`` is a ``(3, 2)`` array whose columns are the unit
  absorbance directions of hematoxylin (column 0) and eosin (column 1);
* a concentration map ``h`` is a ``(2, n_pixels)`` array, pixels in
  row-major image order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import (
    DegenerateStains,
    DimensionMismatch,
    InvalidStainMatrix,
    NoTissue,
    SingularSystem,
)

EPS_PX = 1e-6
OD_MAX = 16.0
MIN_COLUMN_ANGLE = 1e-3

# canonical Ruifrok-Johnston H&E absorbance directions (not unit-normalized)
CANONICAL_H = (0.651, 0.701, 0.290)
CANONICAL_E = (0.216, 0.801, 0.558)


@dataclass(frozen=True)
class MacenkoParams:
    od_threshold: float = 0.15
    angle_percentile: float = 1.0
    min_tissue_pixels: int = 50

    def __post_init__(self):
        if not 0.0 < self.od_threshold < OD_MAX:
            raise ValueError(f"od_threshold must lie in (0, {OD_MAX})")
        if not 0.0 < self.angle_percentile < 50.0:
            raise ValueError("angle_percentile must lie in (0, 50)")
        if self.min_tissue_pixels < 1:
            raise ValueError("min_tissue_pixels must be positive")


def canonical_stain_matrix() -> np.ndarray:
    """Unit-normalized canonical H&E stain matrix."""
    w = np.array([CANONICAL_H, CANONICAL_E], dtype=float).T
    return w / np.linalg.norm(w, axis=0)


def check_image(image) -> np.ndarray:
    image = np.asarray(image, dtype=float)
    if image.ndim != 3 or image.shape[2] != 3:
        raise DimensionMismatch(f"expected (height, width, 3) image, got {image.shape}")
    if image.shape[0] * image.shape[1] < 1:
        raise DimensionMismatch("image has no pixels")
    if not np.all(np.isfinite(image)) or image.min() < 0.0 or image.max() > 1.0:
        raise ValueError("image intensities must lie in [0, 1]")
    return image


def check_stain_matrix(w) -> np.ndarray:
    """Return ``w`` as a float array, raising if it is not a valid stain matrix."""
    w = np.asarray(w, dtype=float)
    if w.shape != (3, 2):
        raise InvalidStainMatrix(f"stain matrix must be 3x2, got {w.shape}")
    if not np.all(np.isfinite(w)):
        raise InvalidStainMatrix("stain matrix has non-finite entries")
    if np.any(w < 0.0):
        raise InvalidStainMatrix("stain matrix has negative components")
    norms = np.linalg.norm(w, axis=0)
    if np.any(np.abs(norms - 1.0) > 1e-9):
        raise InvalidStainMatrix(f"stain columns are not unit norm: {norms}")
    if vector_angle(w[:, 0], w[:, 1]) < MIN_COLUMN_ANGLE:
        raise InvalidStainMatrix("stain columns are (nearly) parallel")
    return w


def vector_angle(a, b) -> float:
    """Angle in radians between two nonzero 3-vectors."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    # atan2 form stays accurate for nearly parallel vectors, unlike arccos
    return float(math.atan2(np.linalg.norm(np.cross(a, b)), float(np.dot(a, b))))


def rgb_to_od(image, i0: float = 1.0) -> np.ndarray:
    image = np.asarray(image, dtype=float)
    od = -np.log(np.maximum(image, EPS_PX) / i0)
    return np.clip(od, 0.0, OD_MAX)


def od_to_rgb(od, i0: float = 1.0) -> np.ndarray:
    od = np.asarray(od, dtype=float)
    return np.clip(i0 * np.exp(-od), 0.0, 1.0)


def solve_concentrations(od, w) -> np.ndarray:
    """Per-pixel least squares ``argmin ||w h - od||`` with negatives clamped to 0.

    ``od`` may be an image ``(height, width, 3)`` or a pixel list ``(n, 3)``;
    the result is always ``(2, n)``.
    """
    w = np.asarray(w, dtype=float)
    if w.shape != (3, 2):
        raise SingularSystem(f"stain matrix must be 3x2, got {w.shape}")
    od = np.asarray(od, dtype=float).reshape(-1, 3)
    g00 = float(w[:, 0] @ w[:, 0])
    g01 = float(w[:, 0] @ w[:, 1])
    g11 = float(w[:, 1] @ w[:, 1])
    det = g00 * g11 - g01 * g01
    if not det > 1e-12 * g00 * g11:
        raise SingularSystem("stain columns are linearly dependent")
    b = od @ w  # (n, 2) right-hand sides w^T od_j
    h0 = (g11 * b[:, 0] - g01 * b[:, 1]) / det
    h1 = (g00 * b[:, 1] - g01 * b[:, 0]) / det
    return np.maximum(np.stack([h0, h1]), 0.0)


def reconstruct(w, h, i0: float = 1.0, width: int | None = None, height: int | None = None):
    """Render ``i0 * exp(-w h)`` as an image of the given size, clamped to [0, 1]."""
    w = np.asarray(w, dtype=float)
    h = np.asarray(h, dtype=float)
    if h.ndim != 2 or h.shape[0] != 2:
        raise DimensionMismatch(f"concentrations must be (2, n), got {h.shape}")
    n = h.shape[1]
    if width is None and height is None:
        width, height = n, 1
    elif width is None or height is None:
        raise DimensionMismatch("give both width and height or neither")
    if width * height != n:
        raise DimensionMismatch(f"{n} pixels do not fill a {height}x{width} image")
    od = (w @ h).T
    return np.clip(i0 * np.exp(-od), 0.0, 1.0).reshape(height, width, 3)


def _fsum_mean(x: np.ndarray) -> np.ndarray:
    return np.array([math.fsum(col) for col in x.T]) / x.shape[0]


def od_covariance(od: np.ndarray) -> np.ndarray:
    """Sample covariance of ``(n, 3)`` OD vectors.

    Sums are exactly rounded (``math.fsum``) so the result does not depend on
    the summation order used by BLAS.
    """
    centered = od - _fsum_mean(od)
    cov = np.empty((3, 3))
    for a in range(3):
        for b in range(a, 3):
            cov[a, b] = cov[b, a] = math.fsum(centered[:, a] * centered[:, b])
    return cov / max(od.shape[0] - 1, 1)


def principal_plane(cov: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Top-two eigenvectors of a symmetric 3x3 matrix, sign-fixed.

    Each vector is flipped so its largest-magnitude component is positive.
    """
    _, vecs = np.linalg.eigh(cov)
    out = []
    for k in (2, 1):
        v = vecs[:, k]
        if v[np.argmax(np.abs(v))] < 0:
            v = -v
        out.append(v)
    return out[0], out[1]


def _nonnegative_unit(v: np.ndarray) -> np.ndarray:
    if v.sum() < 0:
        v = -v
    v = np.maximum(v, 0.0)
    norm = np.linalg.norm(v)
    if norm < 1e-12:
        raise DegenerateStains("stain vector vanished after non-negativity clamp")
    return v / norm


def macenko_decompose(image, params: MacenkoParams | None = None, i0: float = 1.0):
    """Estimate the stain matrix of ``image`` and the concentrations of all its pixels.

    Returns ``(w, h)`` with ``w`` a valid ``(3, 2)`` stain matrix and ``h`` of
    shape ``(2, height * width)``. Only pixels with some channel OD above
    ``params.od_threshold`` inform ``w``.

    Raises:
        NoTissue: fewer than ``params.min_tissue_pixels`` tissue pixels.
        DegenerateStains: the angular extremes coincide (single stain).
    """
    params = params or MacenkoParams()
    image = check_image(image)
    od = rgb_to_od(image, i0).reshape(-1, 3)
    tissue = od[np.max(od, axis=1) > params.od_threshold]
    if tissue.shape[0] < params.min_tissue_pixels:
        raise NoTissue(
            f"{tissue.shape[0]} tissue pixels, need {params.min_tissue_pixels}"
        )

    e1, e2 = principal_plane(od_covariance(tissue))
    t1 = tissue @ e1
    t2 = tissue @ e2
    # measure angles relative to the mean direction so the cone never straddles +-pi
    ref = math.atan2(float(t2.mean()), float(t1.mean()))
    phi = np.angle(np.exp(1j * (np.arctan2(t2, t1) - ref)))
    lo = np.percentile(phi, params.angle_percentile)
    hi = np.percentile(phi, 100.0 - params.angle_percentile)
    if hi - lo < MIN_COLUMN_ANGLE:
        raise DegenerateStains(f"extreme stain angles differ by only {hi - lo:.2e} rad")

    v_lo = _nonnegative_unit(e1 * math.cos(ref + lo) + e2 * math.sin(ref + lo))
    v_hi = _nonnegative_unit(e1 * math.cos(ref + hi) + e2 * math.sin(ref + hi))
    if vector_angle(v_lo, v_hi) < MIN_COLUMN_ANGLE:
        raise DegenerateStains("stain vectors coincide after non-negativity clamp")

    # hematoxylin absorbs more red
    if v_lo[0] >= v_hi[0]:
        w = np.stack([v_lo, v_hi], axis=1)
    else:
        w = np.stack([v_hi, v_lo], axis=1)
    return w, solve_concentrations(od, w)
