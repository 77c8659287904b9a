"""Confusion matrices, subset mIoU, task-recency bias and linear CKA."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from continual.errors import ArchitectureMismatchError, ConfigError, InvalidLabelError, ShapeError
from continual.model import LAYERS, ToySegModel, forward
from continual.schemas import CkaRecord
from continual.types import IGNORE, LabelMap, Rng, Sample

logger = logging.getLogger(__name__)

CKA_TOLERANCE = 1e-6


@dataclass(frozen=True)
class ConfusionMatrix:
    """Pixel counts; rows are ground truth, columns predictions."""

    counts: np.ndarray

    def __post_init__(self):
        counts = np.asarray(self.counts, dtype=np.int64)
        if counts.ndim != 2 or counts.shape[0] != counts.shape[1]:
            raise ShapeError(f"confusion matrix must be square, got {counts.shape}")
        if np.any(counts < 0):
            raise ValueError("confusion counts must be non-negative")
        object.__setattr__(self, "counts", counts)

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @classmethod
    def zeros(cls, num_classes: int) -> ConfusionMatrix:
        return cls(np.zeros((num_classes, num_classes), dtype=np.int64))

    def __add__(self, other: ConfusionMatrix) -> ConfusionMatrix:
        size = max(self.num_classes, other.num_classes)
        total = np.zeros((size, size), dtype=np.int64)
        total[: self.num_classes, : self.num_classes] += self.counts
        total[: other.num_classes, : other.num_classes] += other.counts
        return ConfusionMatrix(total)


def confusion(preds: LabelMap, labels: LabelMap, num_classes: int) -> ConfusionMatrix:
    if preds.data.shape != labels.data.shape:
        raise ShapeError(f"prediction shape {preds.data.shape} != label shape {labels.data.shape}")
    mask = labels.data != IGNORE
    truth = labels.data[mask].astype(np.int64)
    predicted = preds.data[mask].astype(np.int64)
    if truth.size and max(truth.max(), predicted.max()) >= num_classes:
        raise InvalidLabelError(f"class id outside 0..{num_classes - 1}")
    counts = np.bincount(truth * num_classes + predicted, minlength=num_classes * num_classes)
    return ConfusionMatrix(counts.reshape(num_classes, num_classes))


def class_iou(cm: ConfusionMatrix) -> np.ndarray:
    """Per-class IoU; NaN where the class is absent from both truth and predictions."""
    diagonal = np.diag(cm.counts).astype(np.float64)
    union = cm.counts.sum(axis=0) + cm.counts.sum(axis=1) - diagonal
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, diagonal / union, np.nan)


@dataclass(frozen=True)
class MiouResult:
    value: float | None
    per_class: dict[int, float | None] = field(default_factory=dict)
    excluded: list[int] = field(default_factory=list)


def miou(cm: ConfusionMatrix, class_subset: Iterable[int]) -> MiouResult:
    """Mean IoU over ``class_subset``; zero-denominator classes are left out and listed."""
    subset = sorted(set(class_subset))
    if not subset:
        raise ConfigError("mIoU needs a non-empty class subset")
    if subset[-1] >= cm.num_classes or subset[0] < 0:
        raise InvalidLabelError(f"class subset exceeds 0..{cm.num_classes - 1}")
    iou = class_iou(cm)
    per_class = {c: None if np.isnan(iou[c]) else float(iou[c]) for c in subset}
    defined = [v for v in per_class.values() if v is not None]
    excluded = [c for c, v in per_class.items() if v is None]
    return MiouResult(float(np.mean(defined)) if defined else None, per_class, excluded)


def recency_bias(cm: ConfusionMatrix, old_classes: Iterable[int], newest_classes: Iterable[int]) -> float | None:
    """Fraction of old-class pixels predicted as a class of the newest task."""
    old, newest = sorted(set(old_classes)), sorted(set(newest_classes))
    if set(old) & set(newest):
        raise ConfigError("old and newest class sets must be disjoint")
    old_pixels = cm.counts[old].sum() if old else 0
    if old_pixels == 0:
        return None
    return float(cm.counts[np.ix_(old, newest)].sum() / old_pixels) if newest else 0.0


def linear_cka(x: np.ndarray, y: np.ndarray) -> float:
    """Linear centered kernel alignment of two activation matrices (rows = reference pixels)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape[0] != y.shape[0]:
        raise ShapeError(f"CKA needs equal row counts, got {x.shape[0]} and {y.shape[0]}")
    x = x - x.mean(axis=0)
    y = y - y.mean(axis=0)
    denominator = np.linalg.norm(x.T @ x) * np.linalg.norm(y.T @ y)
    if denominator == 0.0:
        return 0.0
    value = np.linalg.norm(y.T @ x) ** 2 / denominator
    return float(min(max(value, 0.0), 1.0 + CKA_TOLERANCE))


@dataclass(frozen=True)
class CkaCurve:
    values: dict[str, float]

    def __post_init__(self):
        for layer, value in self.values.items():
            if not 0.0 <= value <= 1.0 + CKA_TOLERANCE:
                raise ValueError(f"CKA value {value} for {layer} outside [0, 1]")

    def records(self, step: int) -> list[CkaRecord]:
        return [CkaRecord(step=step, layer=layer, value=value) for layer, value in self.values.items()]


def reference_pixels(reference: Sequence[Sample], pixels: int, rng: Rng) -> list[np.ndarray]:
    """Per-sample pixel indices of a seeded subsample of at most ``pixels`` reference pixels."""
    sizes = [s.image.height * s.image.width for s in reference]
    total = sum(sizes)
    chosen = np.sort(rng.choice(total, size=min(pixels, total), replace=False))
    offsets = np.cumsum([0] + sizes)
    return [chosen[(chosen >= lo) & (chosen < hi)] - lo for lo, hi in zip(offsets[:-1], offsets[1:])]


def layer_activations(model: ToySegModel, reference: Sequence[Sample], picks: Sequence[np.ndarray],
                      layers: Sequence[str] = LAYERS) -> dict[str, np.ndarray]:
    stacked: dict[str, list[np.ndarray]] = {layer: [] for layer in layers}
    for sample, pick in zip(reference, picks):
        if pick.size == 0:
            continue
        acts = forward(model, sample.image)
        for layer in layers:
            stacked[layer].append(acts.layer(layer)[pick])
    return {layer: np.concatenate(rows, axis=0) for layer, rows in stacked.items()}


def cka_drift(before: ToySegModel, after: ToySegModel, reference: Sequence[Sample], rng: Rng,
              layers: Sequence[str] = LAYERS, pixels: int = 2000) -> CkaCurve:
    """Per-layer CKA between two snapshots on the same reference pixels.

    The logits layer may differ in width when the head has grown in between.
    """
    if not before.same_architecture(after):
        raise ArchitectureMismatchError("CKA snapshots differ in patch size, channels or hidden widths")
    if not reference:
        raise ConfigError("CKA reference set is empty")
    picks = reference_pixels(reference, pixels, rng)
    xs = layer_activations(before, reference, picks, layers)
    ys = layer_activations(after, reference, picks, layers)
    curve = CkaCurve({layer: linear_cka(xs[layer], ys[layer]) for layer in layers})
    logger.debug("CKA drift: %s", ", ".join(f"{k}={v:.4f}" for k, v in curve.values.items()))
    return curve


def evaluate(model: ToySegModel, samples: Sequence[Sample], num_classes: int,
             seen_classes: Iterable[int] | None = None) -> ConfusionMatrix:
    """Accumulated confusion of the model's predictions over full validation labels.

    Pixels of classes outside ``seen_classes`` count as IGNORE.
    """
    seen = sorted(seen_classes) if seen_classes is not None else None
    total = ConfusionMatrix.zeros(num_classes)
    for sample in samples:
        labels = sample.full_labels
        if seen is not None:
            labels = labels.restricted_to(seen)
        total = total + confusion(forward(model, sample.image).predictions(), labels, num_classes)
    return total


def write_confusion_csv(cm: ConfusionMatrix, path: str | Path) -> None:
    with open(path, "w", newline="") as handle:
        csv.writer(handle).writerows(cm.counts.tolist())


def read_confusion_csv(path: str | Path) -> ConfusionMatrix:
    with open(path, newline="") as handle:
        return ConfusionMatrix(np.array([[int(v) for v in row] for row in csv.reader(handle) if row]))


def write_cka_csv(records: Sequence[CkaRecord], path: str | Path) -> None:
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(("step", "layer", "value"))
        for record in records:
            writer.writerow((record.step, record.layer, repr(record.value)))


def read_cka_csv(path: str | Path) -> list[CkaRecord]:
    with open(path, newline="") as handle:
        return [CkaRecord(step=int(r["step"]), layer=r["layer"], value=float(r["value"]))
                for r in csv.DictReader(handle)]
