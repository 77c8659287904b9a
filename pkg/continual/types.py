"""Shared value types, seeded randomness and label-map utilities."""
from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from continual.errors import EmptyHistogramError, InvalidLabelError, ShapeError

# Unlabeled pixels; excluded from histograms, losses and metrics.
IGNORE = 255


class ScenarioKind(str, Enum):
    CLASS_INCREMENTAL = "class"
    DOMAIN_INCREMENTAL = "domain"


@dataclass(frozen=True)
class Image:
    """Channel-major image with values in [0, 1], stored as float32."""

    data: np.ndarray

    def __post_init__(self):
        if self.data.ndim != 3:
            raise ShapeError(f"image must be (channels, height, width), got {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ShapeError("image contains non-finite values")
        if self.data.size and (self.data.min() < 0.0 or self.data.max() > 1.0):
            raise ShapeError("image values must lie in [0, 1]")
        object.__setattr__(self, "data", np.ascontiguousarray(self.data, dtype=np.float32))

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    def luminance(self) -> np.ndarray:
        return self.data.astype(np.float64).mean(axis=0)


@dataclass(frozen=True)
class LabelMap:
    data: np.ndarray

    def __post_init__(self):
        if self.data.ndim != 2:
            raise ShapeError(f"label map must be (height, width), got {self.data.shape}")
        object.__setattr__(self, "data", np.ascontiguousarray(self.data, dtype=np.uint8))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    def labeled_mask(self) -> np.ndarray:
        return self.data != IGNORE

    def restricted_to(self, classes) -> LabelMap:
        """Copy with every class outside ``classes`` replaced by IGNORE."""
        keep = np.isin(self.data, np.fromiter(classes, dtype=np.int64))
        return LabelMap(np.where(keep, self.data, IGNORE))


@dataclass(frozen=True)
class Sample:
    id: int
    image: Image
    labels: LabelMap
    task_id: int
    # generator ground truth, before out-of-task classes were hidden
    true_labels: LabelMap | None = None

    def __post_init__(self):
        if (self.image.height, self.image.width) != (self.labels.height, self.labels.width):
            raise ShapeError(f"sample {self.id}: image and label map shapes differ")

    @property
    def full_labels(self) -> LabelMap:
        return self.true_labels if self.true_labels is not None else self.labels


@dataclass(frozen=True)
class ClassHistogram:
    counts: np.ndarray
    num_classes: int

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def distinct(self) -> int:
        return int(np.count_nonzero(self.counts))

    def __add__(self, other: ClassHistogram) -> ClassHistogram:
        size = max(self.num_classes, other.num_classes)
        counts = np.zeros(size, dtype=np.int64)
        counts[: self.num_classes] += self.counts
        counts[: other.num_classes] += other.counts
        return ClassHistogram(counts, size)

    @classmethod
    def zeros(cls, num_classes: int) -> ClassHistogram:
        return cls(np.zeros(num_classes, dtype=np.int64), num_classes)


@dataclass(frozen=True)
class TaskDef:
    task_id: int
    train_samples: list[Sample]
    val_samples: list[Sample]
    labeled_classes: frozenset[int]
    scenario: ScenarioKind
    exclusive_classes: frozenset[int] = field(default_factory=frozenset)


class Rng:
    """Seeded PCG64 stream with named, independent substreams.

    ``Rng(7).substream("train", 2)`` always yields the same generator, whatever
    was drawn from the parent before.
    """

    def __init__(self, seed: int, key: tuple[int, ...] = ()):
        self.seed = int(seed)
        self.key = tuple(key)
        sequence = np.random.SeedSequence(self.seed, spawn_key=self.key)
        self.generator = np.random.Generator(np.random.PCG64(sequence))

    def substream(self, name: str, *indices: int) -> Rng:
        tag = zlib.crc32(name.encode("utf-8"))
        return Rng(self.seed, self.key + (tag,) + tuple(int(i) for i in indices))

    def random(self, size=None):
        return self.generator.random(size)

    def integers(self, low, high=None, size=None):
        return self.generator.integers(low, high, size=size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.generator.normal(loc, scale, size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.generator.uniform(low, high, size)

    def choice(self, a, size=None, replace=True, p=None):
        return self.generator.choice(a, size=size, replace=replace, p=p)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)


def class_histogram(labels: LabelMap, num_classes: int) -> ClassHistogram:
    """Per-class pixel counts of a label map; IGNORE pixels are not counted."""
    values = labels.data[labels.data != IGNORE].astype(np.int64)
    if values.size and values.max() >= num_classes:
        raise InvalidLabelError(
            f"label value {int(values.max())} is not a class id below {num_classes}"
        )
    counts = np.bincount(values, minlength=num_classes).astype(np.int64)
    return ClassHistogram(counts, num_classes)


def histogram_distribution(h: ClassHistogram) -> np.ndarray:
    total = h.total
    if total == 0:
        raise EmptyHistogramError("histogram has no labeled pixels")
    return h.counts.astype(np.float64) / total
