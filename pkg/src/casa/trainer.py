"""Min-max stain-adversarial training, its baselines, and group-wise evaluation.

All three trainers share the same loop: seeded per-epoch shuffling
(``seed ^ epoch``), fixed-size mini-batches, and one SGD step per batch.
They differ only in which images the SGD step sees:

* ``train_erm``: the clean patches;
* ``train_random_aug``: each patch under a random feasible stain perturbation;
* ``train_casa``: each patch under its PGD worst-case stain perturbation.

Perturbations are rendered on top of the original patch (see
``apply_perturbation(anchor=...)``), so a zero perturbation leaves the patch
bit-for-bit unchanged and a zero budget reproduces ERM exactly.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .adversary import PgdConfig, pgd_attack
from .calibration import StainBudget
from .errors import DataError, EmptyGroup, EmptyInput
from .perturbation import StainPerturbation, apply_perturbation, sample_random_perturbation
from .stain_core import MacenkoParams, macenko_decompose
from .toy_model import MlpClassifier, TrainConfig

log = logging.getLogger(__name__)


@dataclass
class EpochLog:
    epoch: int
    clean_loss: float
    adv_loss: float
    train_acc: float
    decomposition_failures: int = 0


@dataclass
class TrainLog:
    method: str
    epochs: list[EpochLog] = field(default_factory=list)
    batch_losses: list[float] = field(default_factory=list)
    batch_clean_losses: list[float] = field(default_factory=list)
    perturbations: list[tuple[np.ndarray, StainPerturbation]] = field(default_factory=list, repr=False)

    def to_csv_rows(self) -> list[dict]:
        return [
            {"epoch": e.epoch, "clean_loss": e.clean_loss, "adv_loss": e.adv_loss, "train_acc": e.train_acc}
            for e in self.epochs
        ]


@dataclass
class EvalReport:
    acc_avg: float
    acc_wg: float
    per_group: list[dict]

    def to_json(self) -> dict:
        return {"acc_avg": self.acc_avg, "acc_wg": self.acc_wg, "per_group": self.per_group}


def _decompose_all(images, params: MacenkoParams):
    out = []
    for image in images:
        try:
            out.append(macenko_decompose(image, params))
        except DataError as exc:
            log.debug("decomposition failed: %s", exc)
            out.append(None)
    return out


def _train(dataset, model: MlpClassifier, config: TrainConfig, method: str, augment=None):
    """Shared SGD loop; ``augment(epoch, index, image, label, model)`` returns
    ``(image, perturbation | None, w_ref | None, failed)``."""
    if len(dataset) == 0:
        raise EmptyInput("empty training set")
    model = model.copy()
    images = dataset.images
    labels = dataset.labels
    n = len(labels)
    result = TrainLog(method)
    for epoch in range(config.epochs):
        order = np.random.default_rng(config.seed ^ epoch).permutation(n)
        clean_losses, adv_losses, correct, failures = [], [], 0, 0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            clean = images[idx]
            y = labels[idx]
            if augment is None:
                batch = clean
            else:
                batch = np.empty_like(clean)
                for j, i in enumerate(idx):
                    img, pert, w_ref, failed = augment(epoch, int(i), clean[j], int(y[j]), model)
                    batch[j] = img
                    failures += failed
                    if pert is not None:
                        result.perturbations.append((w_ref, pert))
            clean_loss_vec = model.losses(clean, y)
            correct += int(np.sum(np.argmax(model.logits(clean), axis=1) == y))
            adv_loss = model.sgd_step(batch, y, config.lr)
            clean_loss = float(clean_loss_vec.mean())
            result.batch_losses.append(adv_loss)
            result.batch_clean_losses.append(clean_loss)
            clean_losses.append(clean_loss * len(idx))
            adv_losses.append(adv_loss * len(idx))
        result.epochs.append(EpochLog(epoch, sum(clean_losses) / n, sum(adv_losses) / n,
                                      correct / n, failures))
        log.info("%s epoch %d: clean %.4f adv %.4f acc %.3f failures %d", method, epoch,
                 result.epochs[-1].clean_loss, result.epochs[-1].adv_loss,
                 result.epochs[-1].train_acc, failures)
    return model, result


def train_erm(dataset, model: MlpClassifier, config: TrainConfig):
    """Plain SGD on the clean patches. Returns ``(trained_copy, TrainLog)``."""
    return _train(dataset, model, config, "erm")


def train_casa(dataset, model: MlpClassifier, budget: StainBudget, pgd_config: PgdConfig | None = None,
               config: TrainConfig | None = None, macenko: MacenkoParams | None = None):
    """Min-max training on per-patch worst-case stain perturbations.

    Each patch is decomposed once (stain matrix and concentrations are then
    fixed references for every attack on it). Patches whose decomposition
    fails are trained on unperturbed and counted in the epoch log.
    """
    config = config or TrainConfig()
    pgd_config = pgd_config or PgdConfig()
    refs = _decompose_all(dataset.images, macenko or MacenkoParams())

    def augment(epoch, i, image, label, model):
        ref = refs[i]
        if ref is None:
            return image, None, None, 1
        w_ref, h0 = ref
        cfg = pgd_config
        if cfg.init == "random":
            cfg = replace(cfg, seed=int(np.random.SeedSequence([config.seed, epoch, i]).generate_state(1)[0]))
        res = pgd_attack(model, w_ref, h0, label, budget, cfg, anchor=image)
        return res.adversarial_image, res.perturbation, w_ref, 0

    return _train(dataset, model, config, "casa", augment)


def train_random_aug(dataset, model: MlpClassifier, budget: StainBudget, config: TrainConfig | None = None,
                     macenko: MacenkoParams | None = None):
    """Like ``train_casa`` with uniformly random feasible perturbations instead of PGD."""
    config = config or TrainConfig()
    refs = _decompose_all(dataset.images, macenko or MacenkoParams())
    # separate stream so shuffling matches ERM under the same seed
    rng = np.random.default_rng([config.seed, 1])

    def augment(epoch, i, image, label, model):
        ref = refs[i]
        if ref is None:
            return image, None, None, 1
        w_ref, h0 = ref
        pert = sample_random_perturbation(budget, rng, w_ref)
        height, width = image.shape[:2]
        return apply_perturbation(w_ref, h0, pert, 1.0, width, height, anchor=image), pert, w_ref, 0

    return _train(dataset, model, config, "randaug", augment)


def group_report(predictions, labels, centers) -> EvalReport:
    """Accuracy per (center, label) group; ``acc_avg`` is their unweighted mean."""
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    centers = np.asarray(centers)
    if predictions.size == 0:
        raise EmptyInput("nothing to evaluate")
    groups = []
    for c in sorted(set(centers.tolist())):
        for y in sorted(set(labels.tolist())):
            mask = (centers == c) & (labels == y)
            if not mask.any():
                raise EmptyGroup(f"group center={c} label={y} is empty")
            acc = float(np.mean(predictions[mask] == y))
            groups.append({"center": int(c), "label": int(y), "n": int(mask.sum()), "acc": acc})
    accs = [g["acc"] for g in groups]
    return EvalReport(float(np.mean(accs)), float(np.min(accs)), groups)


def evaluate(model: MlpClassifier, dataset) -> EvalReport:
    """Group-wise accuracy over center x label."""
    if len(dataset) == 0:
        raise EmptyInput("empty evaluation set")
    return group_report(model.predict(dataset.images), dataset.labels, dataset.center_ids)
