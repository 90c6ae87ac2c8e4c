"""Seeded synthetic multi-center H&E-like patches.

Every patch is rendered noise-free through the Beer-Lambert model from a
known stain matrix and concentration map, both kept on the patch so tests
can use them as ground truth. Centers differ by a rotation of each stain
column (by a configured angle, toward a center-specific tangent direction)
and by a per-stain concentration scale. The label is the presence of
hematoxylin-dense blobs.

Random streams are derived from ``(seed, center slot, patch index)``, so the
content of a center does not depend on its id or on generation order.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import InvalidConfig
from .perturbation import rotate_toward
from .stain_core import canonical_stain_matrix, check_stain_matrix, reconstruct


@dataclass(frozen=True)
class Patch:
    image: np.ndarray
    label: int
    center_id: int
    w_true: np.ndarray = field(repr=False)
    h_true: np.ndarray = field(repr=False)


@dataclass(frozen=True)
class CenterSpec:
    center_id: int
    w_true: np.ndarray
    concentration_scale: tuple[float, float]
    patches_per_class: int
    rotation: float = 0.0
    slot: int = 0

    def __post_init__(self):
        check_stain_matrix(self.w_true)
        if min(self.concentration_scale) <= 0:
            raise InvalidConfig("concentration scales must be positive")


@dataclass(frozen=True)
class SynthConfig:
    reference_w: tuple = tuple(map(tuple, canonical_stain_matrix()))
    train_center_ids: tuple[int, ...] = (0, 3, 4)
    heldout_center_id: int = 2
    # training centers rotate each stain column by an angle in [max / 2, max]
    train_max_rotation: float = 0.25
    train_scale_range: tuple[float, float] = (0.9, 1.1)
    heldout_rotation: float = 0.15
    heldout_scale: tuple[float, float] = (0.8, 1.0)
    patch_size: int = 32
    train_patches_per_class: int = 64
    heldout_patches_per_class: int = 100
    background_h: tuple[float, float] = (0.3, 0.4)
    background_e: tuple[float, float] = (0.45, 0.55)
    blob_count: int = 3
    blob_sigma: float = 3.0
    blob_amplitude: float = 1.0
    # small H-dense dots in both classes, fainter than the blobs; they keep the
    # concentration budget from depending on the label alone
    dot_count: int = 10
    dot_sigma: float = 1.2
    dot_amplitude: float = 0.7
    # fraction of pixels whose background texture lacks one stain (gaps in the tissue)
    texture_void: float = 0.15
    noise: float = 0.0
    seed: int = 0

    def validate(self):
        if len(self.train_center_ids) < 2:
            raise InvalidConfig("need at least two training centers")
        ids = list(self.train_center_ids) + [self.heldout_center_id]
        if len(set(ids)) != len(ids):
            raise InvalidConfig("center ids must be distinct")
        for a in (self.train_max_rotation, self.heldout_rotation):
            if not 0.0 <= a <= math.pi / 4:
                raise InvalidConfig("rotation angles must lie in [0, pi/4]")
        if self.patch_size < 16:
            raise InvalidConfig("patch_size must be at least 16")
        lo, hi = self.train_scale_range
        if not 0 < lo <= hi or min(self.heldout_scale) <= 0:
            raise InvalidConfig("concentration scales must be positive")
        if not 0.0 <= self.texture_void < 1.0:
            raise InvalidConfig("texture_void must lie in [0, 1)")
        if self.train_patches_per_class < 1 or self.heldout_patches_per_class < 1:
            raise InvalidConfig("need at least one patch per class")
        check_stain_matrix(np.array(self.reference_w))

    def to_json(self) -> dict:
        d = asdict(self)
        d["reference_w"] = [list(r) for r in self.reference_w]
        return d


@dataclass
class Dataset:
    patches: list[Patch]
    centers: list[int]
    train_centers: list[int]
    heldout_centers: list[int]
    specs: dict[int, CenterSpec] = field(default_factory=dict)

    def split(self, name: str) -> "Dataset":
        """``train`` (training centers) or ``test`` (held-out center)."""
        keep = {"train": self.train_centers, "test": self.heldout_centers}[name]
        return self.select(keep)

    def select(self, center_ids) -> "Dataset":
        ids = set(center_ids)
        return Dataset(
            [p for p in self.patches if p.center_id in ids],
            [c for c in self.centers if c in ids],
            [c for c in self.train_centers if c in ids],
            [c for c in self.heldout_centers if c in ids],
            {c: s for c, s in self.specs.items() if c in ids},
        )

    def __len__(self):
        return len(self.patches)

    @property
    def images(self) -> np.ndarray:
        return np.stack([p.image for p in self.patches])

    @property
    def labels(self) -> np.ndarray:
        return np.array([p.label for p in self.patches], dtype=int)

    @property
    def center_ids(self) -> np.ndarray:
        return np.array([p.center_id for p in self.patches], dtype=int)


def tangent_direction(col: np.ndarray, azimuth: float) -> np.ndarray:
    """Unit tangent to ``col`` at the given azimuth around it (fixed frame)."""
    seed_axis = np.eye(3)[int(np.argmin(np.abs(col)))]
    e_a = seed_axis - (seed_axis @ col) * col
    e_a /= np.linalg.norm(e_a)
    e_b = np.cross(col, e_a)
    return math.cos(azimuth) * e_a + math.sin(azimuth) * e_b


def rotated_stain_matrix(w_ref, angles, azimuths) -> np.ndarray:
    """Rotate column ``k`` of ``w_ref`` by ``angles[k]`` toward the tangent at ``azimuths[k]``."""
    w_ref = np.asarray(w_ref, dtype=float)
    out = np.empty_like(w_ref)
    for k in range(2):
        v = rotate_toward(w_ref[:, k], tangent_direction(w_ref[:, k], azimuths[k]), angles[k])
        out[:, k] = v / np.linalg.norm(v)
    return out


def _valid_azimuths(col, angle, azimuths) -> bool:
    return all(np.all(rotate_toward(col, tangent_direction(col, a), angle) >= 0) for a in azimuths)


def _draw_phase(rng, col, angle, offsets) -> float:
    """Random phase such that every rotated column stays non-negative."""
    for _ in range(10_000):
        phase = rng.uniform(0, 2 * math.pi)
        if _valid_azimuths(col, angle, phase + offsets):
            return phase
    raise InvalidConfig(f"no non-negative rotation by {angle} rad exists")


def smooth_field(rng: np.random.Generator, size: int, n_waves: int = 3) -> np.ndarray:
    """Low-frequency random field in [-1, 1] built from a few planar cosines."""
    yy, xx = np.mgrid[0:size, 0:size] / size
    f = np.zeros((size, size))
    for _ in range(n_waves):
        kx, ky = rng.uniform(-2.0, 2.0, size=2)
        f += np.cos(2 * np.pi * (kx * xx + ky * yy) + rng.uniform(0, 2 * np.pi))
    return f / n_waves


def concentration_field(rng: np.random.Generator, label: int, config: SynthConfig) -> np.ndarray:
    """``(2, size * size)`` concentrations before center scaling."""
    size = config.patch_size
    level_h = rng.uniform(*config.background_h)
    level_e = rng.uniform(*config.background_e)
    h_bg = level_h * (1 + 0.3 * smooth_field(rng, size)) * rng.uniform(0, 2, (size, size))
    e_bg = level_e * (1 + 0.3 * smooth_field(rng, size)) * rng.uniform(0, 2, (size, size))
    if config.texture_void > 0:
        h_bg[rng.random((size, size)) < config.texture_void] = 0.0
        e_bg[rng.random((size, size)) < config.texture_void] = 0.0
    yy, xx = np.mgrid[0:size, 0:size]

    def bumps(count, sigma, amplitude):
        out = np.zeros((size, size))
        for _ in range(count):
            cy, cx = rng.uniform(2 * sigma, size - 2 * sigma, size=2)
            r2 = (yy - cy) ** 2 + (xx - cx) ** 2
            # max, not sum: overlapping bumps do not stack above the amplitude
            out = np.maximum(out, amplitude * np.exp(-r2 / (2 * sigma ** 2)))
        return out

    dense = bumps(config.dot_count, config.dot_sigma, config.dot_amplitude)
    if label == 1:
        dense = np.maximum(dense, bumps(config.blob_count, config.blob_sigma, config.blob_amplitude))
    h_bg = h_bg + dense
    return np.stack([h_bg.ravel(), e_bg.ravel()])


def generate_center(spec: CenterSpec, config: SynthConfig, seed: int | None = None) -> list[Patch]:
    """Balanced patches for one center (labels alternate 0, 1, 0, 1, ...)."""
    seed = config.seed if seed is None else seed
    size = config.patch_size
    scale = np.asarray(spec.concentration_scale, dtype=float)[:, None]
    patches = []
    for idx in range(2 * spec.patches_per_class):
        label = idx % 2
        rng = np.random.default_rng([seed, spec.slot, idx])
        h = concentration_field(rng, label, config) * scale
        image = reconstruct(spec.w_true, h, 1.0, size, size)
        if config.noise > 0:
            image = np.clip(image + config.noise * rng.standard_normal(image.shape), 0.0, 1.0)
        patches.append(Patch(image, label, spec.center_id, spec.w_true, h))
    return patches


def center_specs(config: SynthConfig) -> list[CenterSpec]:
    """Training center specs followed by the held-out center spec.

    Training center ``c`` rotates each stain column by an angle drawn from
    ``[train_max_rotation / 2, train_max_rotation]`` toward azimuth
    ``phase + 2 pi c / n_train`` around it, so the training centers surround
    the reference; the held-out center uses its own random azimuth.
    """
    config.validate()
    w_ref = np.array(config.reference_w, dtype=float)
    n_train = len(config.train_center_ids)
    rng = np.random.default_rng([config.seed, 10**9])
    offsets = 2 * math.pi * np.arange(n_train) / n_train
    theta = config.train_max_rotation
    phases = [_draw_phase(rng, w_ref[:, k], theta, offsets) for k in range(2)]
    specs = []
    for slot, cid in enumerate(config.train_center_ids):
        angles = rng.uniform(theta / 2, theta, size=2)
        scale = tuple(float(s) for s in rng.uniform(*config.train_scale_range, size=2))
        w = rotated_stain_matrix(w_ref, angles, [phases[k] + offsets[slot] for k in range(2)])
        specs.append(CenterSpec(cid, w, scale, config.train_patches_per_class, float(angles.max()), slot))
    theta_ho = config.heldout_rotation
    az_ho = [_draw_phase(rng, w_ref[:, k], theta_ho, np.zeros(1)) for k in range(2)]
    specs.append(CenterSpec(
        config.heldout_center_id,
        rotated_stain_matrix(w_ref, [theta_ho, theta_ho], az_ho),
        tuple(float(s) for s in config.heldout_scale),
        config.heldout_patches_per_class,
        theta_ho,
        n_train,
    ))
    return specs


def generate_dataset(config: SynthConfig | None = None) -> Dataset:
    config = config or SynthConfig()
    specs = center_specs(config)
    patches = [p for spec in specs for p in generate_center(spec, config)]
    return Dataset(
        patches,
        [s.center_id for s in specs],
        list(config.train_center_ids),
        [config.heldout_center_id],
        {s.center_id: s for s in specs},
    )
