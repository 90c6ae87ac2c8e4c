"""Held-out-center comparison of ERM, random stain augmentation and CASA.

For each seed: generate the synthetic multi-center dataset, calibrate a
budget on the training centers, train all three methods from the same
initialization, and score them on the held-out center.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .adversary import PgdConfig
from .calibration import StainBudget, angular_deviation, calibrate, mean_stain_matrix
from .errors import DataError
from .stain_core import macenko_decompose
from .synth_data import SynthConfig, generate_dataset
from .toy_model import MlpClassifier, TrainConfig
from .trainer import EvalReport, evaluate, train_casa, train_erm, train_random_aug

log = logging.getLogger(__name__)

METHODS = ("erm", "randaug", "casa")


@dataclass
class SeedResult:
    seed: int
    budget: StainBudget
    heldout_alpha: float
    heldout: dict[str, EvalReport] = field(default_factory=dict)
    train: dict[str, EvalReport] = field(default_factory=dict)
    seconds: float = 0.0


def calibrate_dataset(dataset, delta: float = 0.05, beta: float = 0.05):
    """Budget and mean stain matrix from every decomposable patch of ``dataset``."""
    matrices, maps = [], []
    for p in dataset.patches:
        try:
            w, h = macenko_decompose(p.image)
        except DataError:
            continue
        matrices.append(w)
        maps.append(h)
    return calibrate(matrices, maps, delta, beta), mean_stain_matrix(matrices)


def run_seed(seed: int, synth: SynthConfig | None = None, train: TrainConfig | None = None,
             pgd: PgdConfig | None = None, methods=METHODS) -> SeedResult:
    start = time.perf_counter()
    synth = replace(synth or SynthConfig(), seed=seed)
    train_cfg = replace(train or TrainConfig(), seed=seed)
    dataset = generate_dataset(synth)
    train_set, test_set = dataset.split("train"), dataset.split("test")
    budget, w_bar = calibrate_dataset(train_set)
    alpha = angular_deviation(dataset.specs[synth.heldout_center_id].w_true, w_bar)
    result = SeedResult(seed, budget, alpha)
    init = MlpClassifier.init(seed, scale=train_cfg.init_scale)
    for method in methods:
        if method == "erm":
            model, _ = train_erm(train_set, init, train_cfg)
        elif method == "randaug":
            model, _ = train_random_aug(train_set, init, budget, train_cfg)
        elif method == "casa":
            model, _ = train_casa(train_set, init, budget, pgd or PgdConfig(), train_cfg)
        else:
            raise ValueError(f"unknown method {method!r}")
        result.heldout[method] = evaluate(model, test_set)
        result.train[method] = evaluate(model, train_set)
    result.seconds = time.perf_counter() - start
    log.info("seed %d: %s", seed, {m: round(r.acc_avg, 3) for m, r in result.heldout.items()})
    return result


def compare_methods(seeds=range(5), synth: SynthConfig | None = None, train: TrainConfig | None = None,
                    pgd: PgdConfig | None = None, methods=METHODS) -> list[SeedResult]:
    return [run_seed(s, synth, train, pgd, methods) for s in seeds]


def mean_heldout_accuracy(results, metric: str = "acc_avg") -> dict[str, float]:
    methods = results[0].heldout.keys()
    return {m: float(np.mean([getattr(r.heldout[m], metric) for r in results])) for m in methods}
