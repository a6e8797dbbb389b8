"""Confusion matrices, OA/AA/kappa, report tables and P6 classification maps."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from .data import HsiCube, window
from .errors import ConfigError, ContractError
from .model import ModelConfig, predict


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # (K, K), rows true class, cols predicted

    @property
    def classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.counts + other.counts)


def accumulate(preds, labels, classes: int) -> ConfusionMatrix:
    """Count ``(true, predicted)`` pairs; both use 1-based class ids."""
    preds = np.asarray(preds, dtype=np.int64).reshape(-1)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if preds.shape != labels.shape:
        raise ContractError(f"{len(preds)} predictions for {len(labels)} labels")
    for name, arr in (("label", labels), ("prediction", preds)):
        if arr.size and (arr.min() < 1 or arr.max() > classes):
            raise ContractError(f"{name} outside 1..{classes}")
    counts = np.zeros((classes, classes), dtype=np.int64)
    np.add.at(counts, (labels - 1, preds - 1), 1)
    return ConfusionMatrix(counts)


def _counts(c) -> np.ndarray:
    return c.counts if isinstance(c, ConfusionMatrix) else np.asarray(c)


def per_class_accuracy(c) -> np.ndarray:
    """Recall per class; NaN where a class has no samples."""
    counts = _counts(c).astype(np.float64)
    support = counts.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(support > 0, np.diag(counts) / support, np.nan)


def oa(c) -> float:
    counts = _counts(c)
    total = counts.sum()
    if total <= 0:
        raise ContractError("empty confusion matrix")
    return float(np.trace(counts) / total)


def aa(c) -> float:
    """Mean per-class recall over classes that have samples."""
    acc = per_class_accuracy(c)
    if np.isnan(acc).all():
        raise ContractError("empty confusion matrix")
    if np.isnan(acc).any():
        empty = [i + 1 for i in np.flatnonzero(np.isnan(acc))]
        warnings.warn(f"classes {empty} have no samples; excluded from AA", stacklevel=2)
    return float(np.nanmean(acc))


def kappa(c) -> float:
    counts = _counts(c).astype(np.float64)
    total = counts.sum()
    if total <= 0:
        raise ContractError("empty confusion matrix")
    p_o = np.trace(counts) / total
    p_e = float(np.sum(counts.sum(axis=1) * counts.sum(axis=0)) / total ** 2)
    if p_e == 1.0:
        warnings.warn("kappa undefined (chance agreement is 1); reporting 0", stacklevel=2)
        return 0.0
    return float((p_o - p_e) / (1.0 - p_e))


@dataclass
class EvalResult:
    confusion: ConfusionMatrix
    per_class: np.ndarray
    oa: float
    aa: float
    kappa: float


def evaluate_predictions(preds, labels, classes: int) -> EvalResult:
    cm = accumulate(preds, labels, classes)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return EvalResult(cm, per_class_accuracy(cm), oa(cm), aa(cm), kappa(cm))


def _samples(cube: HsiCube, locs: np.ndarray, config: ModelConfig) -> np.ndarray:
    return np.stack([window(cube.radiance, r, c, config.input_mode, config.patch_side)
                     for r, c in locs])


def predict_locations(params: Mapping[str, np.ndarray], config: ModelConfig, cube: HsiCube,
                      locs: np.ndarray, chunk: int = 512) -> np.ndarray:
    if cube.m != config.m:
        raise ConfigError(f"checkpoint expects {config.m} bands, cube has {cube.m}")
    dtype = np.asarray(params["gse.weight"]).dtype
    out = [predict(params, config, _samples(cube, locs[i:i + chunk], config).astype(dtype))
           for i in range(0, len(locs), chunk)]
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def evaluate(params, config: ModelConfig, cube: HsiCube, split_tag="test") -> EvalResult:
    """Deterministic eval-mode pass over every pixel tagged ``split_tag``."""
    if cube.classes != config.classes:
        raise ConfigError(f"checkpoint has {config.classes} classes, cube has {cube.classes}")
    locs = cube.locations(split_tag)
    if len(locs) == 0:
        raise ContractError(f"split {split_tag!r} is empty")
    preds = predict_locations(params, config, cube, locs)
    return evaluate_predictions(preds, cube.labels[locs[:, 0], locs[:, 1]], config.classes)


def format_report(result: EvalResult, class_names=None, title: str | None = None) -> str:
    """Per-class accuracy rows followed by OA, AA and kappa, as percentages except kappa."""
    lines = [title] if title else []
    lines.append(f"{'Class':<6} {'Name':<30} {'Accuracy (%)':>12}")
    for i, acc in enumerate(result.per_class):
        name = class_names[i] if class_names else ""
        cell = "n/a" if np.isnan(acc) else f"{100 * acc:.2f}"
        lines.append(f"{i + 1:<6} {name:<30} {cell:>12}")
    lines.append(f"{'OA (%)':<37} {100 * result.oa:>12.2f}")
    lines.append(f"{'AA (%)':<37} {100 * result.aa:>12.2f}")
    lines.append(f"{'Kappa':<37} {result.kappa:>12.4f}")
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------
# classification maps

PALETTE_16 = [
    (255, 0, 0), (0, 255, 0), (0, 0, 255), (255, 255, 0), (0, 255, 255), (255, 0, 255),
    (176, 48, 96), (46, 139, 87), (160, 32, 240), (255, 127, 80), (127, 255, 212),
    (218, 112, 214), (160, 82, 45), (127, 255, 0), (216, 191, 216), (238, 0, 0),
]
PALETTE_9 = [
    (192, 192, 192), (0, 255, 0), (0, 255, 255), (0, 128, 0), (255, 0, 255),
    (165, 82, 41), (128, 0, 128), (255, 0, 0), (255, 255, 0),
]
PALETTE_15 = [
    (0, 205, 0), (127, 255, 0), (46, 139, 87), (0, 139, 0), (160, 82, 45), (0, 255, 255),
    (255, 255, 255), (216, 191, 216), (255, 0, 0), (139, 0, 0), (100, 100, 100), (255, 255, 0),
    (238, 154, 0), (85, 26, 139), (255, 127, 80),
]


def palette_for(classes: int) -> list[tuple[int, int, int]]:
    """The 9- or 15-entry palette for those class counts, else the 16-entry one cycled."""
    if classes == 9:
        return PALETTE_9
    if classes == 15:
        return PALETTE_15
    return [PALETTE_16[i % 16] for i in range(classes)]


def map_image(labels: np.ndarray, classes: int) -> np.ndarray:
    """RGB array for a 0..K label raster; 0 is black."""
    lut = np.zeros((classes + 1, 3), dtype=np.uint8)
    lut[1:] = palette_for(classes)
    return lut[labels]


def write_ppm(path, rgb: np.ndarray) -> None:
    h, w, _ = rgb.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + rgb.astype(np.uint8).tobytes())


def render_map(params, config: ModelConfig, cube: HsiCube, path, all_pixels: bool = False) -> np.ndarray:
    """Predict labeled pixels (or every pixel) and write a binary P6 map; returns the label raster."""
    locs = np.argwhere(np.ones_like(cube.labels, dtype=bool)) if all_pixels else cube.labeled_locations()
    raster = np.zeros(cube.labels.shape, dtype=np.int64)
    if len(locs):
        raster[locs[:, 0], locs[:, 1]] = predict_locations(params, config, cube, locs)
    write_ppm(path, map_image(raster, config.classes))
    return raster
