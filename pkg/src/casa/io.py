"""File formats: 8-bit PNG images, stain/concentration JSON, synthetic dataset folders."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import InvalidStainMatrix
from .stain_core import check_image, check_stain_matrix
from .synth_data import CenterSpec, Dataset, Patch

STAIN_ORDER = ["H", "E"]


def read_png(path) -> np.ndarray:
    """``(H, W, 3)`` float image in [0, 1] (``v / 255``)."""
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=float) / 255.0


def write_png(path, image) -> None:
    image = np.asarray(image, dtype=float)
    data = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(data, mode="RGB").save(path)


def read_json(path):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def write_json(path, doc) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")


def stain_to_json(w, h=None, width=None, height=None) -> dict:
    """Row-major 3x2 stain matrix, optionally with its ``(2, N)`` concentrations."""
    w = np.asarray(w, dtype=float)
    doc = {"w": w.tolist(), "order": list(STAIN_ORDER)}
    if h is not None:
        doc["width"] = int(width)
        doc["height"] = int(height)
        doc["h"] = np.asarray(h, dtype=float).tolist()
    return doc


def stain_from_json(doc) -> np.ndarray:
    if doc.get("order", STAIN_ORDER) != STAIN_ORDER:
        raise InvalidStainMatrix(f"unsupported stain order {doc.get('order')!r}")
    w = np.asarray(doc["w"], dtype=float)
    if w.shape != (3, 2):
        raise InvalidStainMatrix(f"stain matrix must be 3x2 row-major, got shape {w.shape}")
    check_stain_matrix(w)
    return w


def list_pngs(directory) -> list[Path]:
    """All ``*.png`` below ``directory`` in sorted order."""
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"not a directory: {directory}")
    return sorted(directory.rglob("*.png"))


def write_dataset(dataset: Dataset, out, config_doc: dict, seed: int) -> Path:
    """Write ``<out>/<center>/<label>/<idx>.png`` and ``manifest.json``."""
    out = Path(out)
    counters: dict[tuple[int, int], int] = {}
    for p in dataset.patches:
        key = (p.center_id, p.label)
        idx = counters.get(key, 0)
        counters[key] = idx + 1
        write_png(out / str(p.center_id) / str(p.label) / f"{idx}.png", p.image)
    manifest = {
        "seed": seed,
        "config": config_doc,
        "train_centers": list(dataset.train_centers),
        "heldout_centers": list(dataset.heldout_centers),
        "centers": [
            {
                "center_id": s.center_id,
                "role": "heldout" if s.center_id in dataset.heldout_centers else "train",
                "w_true": np.asarray(s.w_true).tolist(),
                "concentration_scale": list(s.concentration_scale),
                "rotation_rad": s.rotation,
                "patches_per_class": s.patches_per_class,
            }
            for s in dataset.specs.values()
        ],
    }
    write_json(out / "manifest.json", manifest)
    return out / "manifest.json"


def read_dataset(directory) -> Dataset:
    """Inverse of :func:`write_dataset` (images come back 8-bit quantized)."""
    directory = Path(directory)
    manifest = read_json(directory / "manifest.json")
    specs = {}
    patches = []
    for c in manifest["centers"]:
        cid = int(c["center_id"])
        w = np.asarray(c["w_true"], dtype=float)
        specs[cid] = CenterSpec(cid, w, tuple(c["concentration_scale"]), int(c["patches_per_class"]),
                                float(c.get("rotation_rad", 0.0)))
        for label in (0, 1):
            files = sorted((directory / str(cid) / str(label)).glob("*.png"), key=lambda f: int(f.stem))
            for f in files:
                image = read_png(f)
                check_image(image)
                patches.append(Patch(image, label, cid, w, None))
    return Dataset(
        patches,
        [int(c["center_id"]) for c in manifest["centers"]],
        [int(c) for c in manifest["train_centers"]],
        [int(c) for c in manifest["heldout_centers"]],
        specs,
    )
