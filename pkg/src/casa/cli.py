"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data error, 3 I/O error. Diagnostics
go to standard error; results go to the requested files or to standard
output as JSON.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .adversary import PgdConfig, pgd_attack
from .calibration import ImageStainStats, StainBudget, budget_from_stats, image_stats
from .errors import DataError, EmptyInput, InvalidConfig
from .io import (
    list_pngs,
    read_dataset,
    read_json,
    read_png,
    stain_to_json,
    write_dataset,
    write_json,
    write_png,
)
from .perturbation import apply_perturbation, sample_random_perturbation
from .stain_core import macenko_decompose
from .synth_data import SynthConfig, generate_dataset
from .toy_model import MlpClassifier, TrainConfig
from .trainer import evaluate, train_casa, train_erm, train_random_aug

log = logging.getLogger("casa")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_IO = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def default_seed() -> int:
    value = os.environ.get("CASA_SEED")
    if value is None:
        return 0
    try:
        return int(value)
    except ValueError:
        raise UsageError(f"CASA_SEED must be an integer, got {value!r}") from None


def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def _nonneg_int(text):
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative integer, got {text}")
    return v


def _unit_interval(text):
    v = float(text)
    if not 0.0 < v < 1.0:
        raise argparse.ArgumentTypeError(f"expected a value in (0, 1), got {text}")
    return v


def _emit(doc, out):
    if out:
        write_json(out, doc)
    else:
        json.dump(doc, sys.stdout, indent=2)
        sys.stdout.write("\n")


def _load_budget(path) -> StainBudget:
    return StainBudget.from_json(read_json(path))


def _load_model(path) -> MlpClassifier:
    return MlpClassifier.from_json(read_json(path))


def _load_data(args):
    if args.data:
        return read_dataset(args.data)
    return generate_dataset(SynthConfig(seed=args.seed))


def _image_inputs(args) -> list[tuple[str, Path]]:
    if args.image:
        return [(Path(args.image).name, Path(args.image))]
    root = Path(args.images)
    return [(str(p.relative_to(root)), p) for p in list_pngs(root)]


# ---------------------------------------------------------------- subcommands

def cmd_decompose(args):
    image = read_png(args.image)
    w, h = macenko_decompose(image, i0=args.i0)
    height, width = image.shape[:2]
    doc = stain_to_json(w, h if args.concentrations else None, width, height)
    _emit(doc, args.out)


def _decompose_dirs(directories):
    ids, matrices, maps = [], [], []
    inputs = []
    for d in directories:
        # ids stay relative to a single directory; several get the directory as prefix
        for name, path in _image_inputs(argparse.Namespace(image=None, images=d)):
            inputs.append((name if len(directories) == 1 else str(Path(d) / name), path))
    for name, path in inputs:
        try:
            w, h = macenko_decompose(read_png(path))
        except DataError as exc:
            log.warning("skipping %s: %s", name, exc)
            continue
        ids.append(name)
        matrices.append(w)
        maps.append(h)
    return ids, matrices, maps


def _read_stats_csv(path) -> list[ImageStainStats]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = {"image_id", "alpha_rad", "r_h", "r_e"} - set(reader.fieldnames or [])
        if missing:
            raise DataError(f"stats file lacks columns {sorted(missing)}")
        return [ImageStainStats(row["image_id"], float(row["alpha_rad"]), (float(row["r_h"]), float(row["r_e"])))
                for row in reader]


def _write_stats_csv(path, stats):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["image_id", "alpha_rad", "r_h", "r_e"])
        for s in stats:
            writer.writerow([s.image_id, repr(s.alpha), repr(s.r[0]), repr(s.r[1])])


def cmd_calibrate(args):
    if args.stats:
        stats = _read_stats_csv(args.stats)
    else:
        ids, matrices, maps = _decompose_dirs(args.images)
        if len(matrices) < 2:
            raise EmptyInput(f"need at least two decomposable images, found {len(matrices)}")
        stats = image_stats(matrices, maps, ids)
    budget = budget_from_stats(stats, args.delta, args.beta)
    if args.stats_out:
        _write_stats_csv(args.stats_out, stats)
    log.info("calibrated on %d images: tau_w=%.4f rad tau_h=%.4f", budget.n, budget.tau_w, budget.tau_h)
    _emit(budget.to_json(), args.out)


def _default_label(model, image, label):
    # without a label, attack the model's own prediction
    return int(model.predict(image[None])[0]) if label is None else label


def cmd_augment(args):
    if args.mode == "adversarial" and not args.model:
        raise UsageError("--mode adversarial requires --model")
    budget = _load_budget(args.budget)
    model = _load_model(args.model) if args.model else None
    out = Path(args.out)
    record = {}
    for index, (name, path) in enumerate(_image_inputs(args)):
        image = read_png(path)
        height, width = image.shape[:2]
        try:
            w, h = macenko_decompose(image)
        except DataError as exc:
            log.warning("%s left unchanged: %s", name, exc)
            write_png(out / name, image)
            record[name] = None
            continue
        if args.mode == "random":
            pert = sample_random_perturbation(budget, np.random.default_rng([args.seed, index]), w)
            result = apply_perturbation(w, h, pert, 1.0, width, height, anchor=image)
        else:
            label = _default_label(model, image, args.label)
            res = pgd_attack(model, w, h, label, budget, PgdConfig(k_steps=args.k, seed=args.seed), anchor=image)
            pert, result = res.perturbation, res.adversarial_image
        write_png(out / name, result)
        record[name] = pert.to_json()
    write_json(out / "perturbations.json", record)
    log.info("wrote %d images to %s", len(record), out)


def cmd_attack(args):
    budget = _load_budget(args.budget)
    model = _load_model(args.model)
    image = read_png(args.image)
    w, h = macenko_decompose(image)
    label = _default_label(model, image, args.label)
    cfg = PgdConfig(k_steps=args.k, init=args.init, seed=args.seed)
    res = pgd_attack(model, w, h, label, budget, cfg, anchor=image)
    if args.out_image:
        write_png(args.out_image, res.adversarial_image)
    doc = res.to_json()
    doc["label"] = label
    doc["clean_loss"] = res.loss_trajectory[0]
    _emit(doc, args.out_json)


def _as_tuple(v):
    return tuple(_as_tuple(x) for x in v) if isinstance(v, list) else v


def cmd_generate(args):
    overrides = read_json(args.config) if args.config else {}
    if not isinstance(overrides, dict):
        raise InvalidConfig("--config must hold a JSON object")
    unknown = set(overrides) - set(SynthConfig.__dataclass_fields__)
    if unknown:
        raise InvalidConfig(f"unknown generator settings {sorted(unknown)}")
    overrides = {k: _as_tuple(v) for k, v in overrides.items()}
    cfg = replace(SynthConfig(seed=args.seed), **overrides)
    if args.train_per_class:
        cfg = replace(cfg, train_patches_per_class=args.train_per_class)
    if args.heldout_per_class:
        cfg = replace(cfg, heldout_patches_per_class=args.heldout_per_class)
    if args.patch_size:
        cfg = replace(cfg, patch_size=args.patch_size)
    dataset = generate_dataset(cfg)
    path = write_dataset(dataset, args.out, cfg.to_json(), cfg.seed)
    log.info("wrote %d patches, manifest %s", len(dataset), path)


def _train_budget(args, train):
    if args.budget:
        return _load_budget(args.budget)
    matrices, maps = [], []
    for p in train.patches:
        try:
            w, h = macenko_decompose(p.image)
        except DataError:
            continue
        matrices.append(w)
        maps.append(h)
    if len(matrices) < 2:
        raise EmptyInput("too few decomposable training patches to calibrate a budget")
    return budget_from_stats(image_stats(matrices, maps), 0.05, 0.05)


def cmd_train_demo(args):
    dataset = _load_data(args)
    train = dataset.split("train")
    tc = TrainConfig(seed=args.seed) if args.epochs is None else TrainConfig(seed=args.seed, epochs=args.epochs)
    model = MlpClassifier.init(args.seed, scale=tc.init_scale)
    if args.method == "erm":
        trained, train_log = train_erm(train, model, tc)
        budget = None
    else:
        budget = _train_budget(args, train)
        log.info("budget tau_w=%.4f tau_h=%.4f", budget.tau_w, budget.tau_h)
        if args.method == "casa":
            trained, train_log = train_casa(train, model, budget, PgdConfig(k_steps=args.k), tc)
        else:
            trained, train_log = train_random_aug(train, model, budget, tc)
    if args.out_checkpoint:
        write_json(args.out_checkpoint, trained.to_json())
    if args.log:
        Path(args.log).parent.mkdir(parents=True, exist_ok=True)
        with open(args.log, "w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=["epoch", "clean_loss", "adv_loss", "train_acc"])
            writer.writeheader()
            writer.writerows(train_log.to_csv_rows())
    summary = {
        "method": args.method,
        "epochs": tc.epochs,
        "seed": args.seed,
        "budget": budget.to_json() if budget else None,
        "train": evaluate(trained, train).to_json(),
        "heldout": evaluate(trained, dataset.split("test")).to_json(),
    }
    _emit(summary, None)


def cmd_eval(args):
    dataset = _load_data(args)
    if args.split != "all":
        dataset = dataset.split(args.split)
    _emit(evaluate(_load_model(args.model), dataset).to_json(), args.out)


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    seed = default_seed()
    p = _Parser(prog="casa", description="Calibrated adversarial stain augmentation toolkit.")
    p.add_argument("--version", action="version", version=f"casa {__version__}")
    p.add_argument("-v", "--verbose", action="count", default=0, help="repeat for more detail")
    p.add_argument("--threads", type=_positive_int, default=1,
                   help="BLAS threads (results do not depend on this)")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("decompose", help="Macenko stain matrix of one PNG")
    s.add_argument("--image", required=True)
    s.add_argument("--out", help="JSON path (default: stdout)")
    s.add_argument("--i0", type=float, default=1.0)
    s.add_argument("--concentrations", action="store_true", help="include the 2xN concentration map")
    s.set_defaults(func=cmd_decompose)

    s = sub.add_parser("calibrate", help="stain budget from a corpus")
    src = s.add_mutually_exclusive_group(required=True)
    src.add_argument("--images", nargs="+", help="directories of PNGs (searched recursively)")
    src.add_argument("--stats", help="CSV with image_id,alpha_rad,r_h,r_e")
    s.add_argument("--delta", type=_unit_interval, default=0.05)
    s.add_argument("--beta", type=_unit_interval, default=0.05)
    s.add_argument("--out", help="budget JSON path (default: stdout)")
    s.add_argument("--stats-out", help="also write per-image stats CSV here")
    s.set_defaults(func=cmd_calibrate)

    s = sub.add_parser("augment", help="random or adversarial stain augmentation")
    src = s.add_mutually_exclusive_group(required=True)
    src.add_argument("--image")
    src.add_argument("--images")
    s.add_argument("--mode", choices=["random", "adversarial"], required=True)
    s.add_argument("--budget", required=True)
    s.add_argument("--model", help="checkpoint; required for adversarial mode")
    s.add_argument("--label", type=int, choices=[0, 1], help="attack target label (default: prediction)")
    s.add_argument("--k", type=_nonneg_int, default=5)
    s.add_argument("--seed", type=int, default=seed)
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_augment)

    s = sub.add_parser("attack", help="PGD worst-case stain perturbation of one image")
    s.add_argument("--image", required=True)
    s.add_argument("--budget", required=True)
    s.add_argument("--model", required=True)
    s.add_argument("--k", type=_nonneg_int, default=5)
    s.add_argument("--label", type=int, choices=[0, 1])
    s.add_argument("--init", choices=["zero", "random"], default="zero")
    s.add_argument("--seed", type=int, default=seed)
    s.add_argument("--out-image")
    s.add_argument("--out-json", help="attack result JSON (default: stdout)")
    s.set_defaults(func=cmd_attack)

    s = sub.add_parser("generate", help="synthetic multi-center dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=seed)
    s.add_argument("--config", help="JSON object of generator settings to override")
    s.add_argument("--train-per-class", type=_positive_int)
    s.add_argument("--heldout-per-class", type=_positive_int)
    s.add_argument("--patch-size", type=_positive_int)
    s.set_defaults(func=cmd_generate)

    s = sub.add_parser("train-demo", help="train the toy classifier with CASA, ERM or random augmentation")
    s.add_argument("--method", choices=["casa", "erm", "randaug"], default="casa")
    s.add_argument("--budget", help="budget JSON (default: calibrate on the training centers)")
    s.add_argument("--data", help="dataset directory written by 'generate' (default: generate in memory)")
    s.add_argument("--epochs", type=_nonneg_int)
    s.add_argument("--k", type=_nonneg_int, default=5)
    s.add_argument("--seed", type=int, default=seed)
    s.add_argument("--out-checkpoint")
    s.add_argument("--log", help="per-epoch CSV log")
    s.set_defaults(func=cmd_train_demo)

    s = sub.add_parser("eval", help="group-wise accuracy of a checkpoint")
    s.add_argument("--model", required=True)
    s.add_argument("--data", help="dataset directory (default: generate in memory)")
    s.add_argument("--split", choices=["test", "train", "all"], default="test")
    s.add_argument("--seed", type=int, default=seed)
    s.add_argument("--out")
    s.set_defaults(func=cmd_eval)
    return p


def _set_threads(n):
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:
        log.debug("threadpoolctl unavailable; --threads ignored")
        return None
    return threadpool_limits(n)


def run(argv=None) -> int:
    try:
        parser = build_parser()
        args = parser.parse_args(argv)
        logging.basicConfig(level=[logging.WARNING, logging.INFO, logging.DEBUG][min(args.verbose, 2)],
                            format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
        if args.command is None:
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        _set_threads(args.threads)
        args.func(args)
        return EXIT_OK
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except (OSError, json.JSONDecodeError) as exc:
        print(f"casa: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (DataError, ValueError, KeyError) as exc:
        print(f"casa: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
