"""Per-sample statistics ranked by the selection policies."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage
from scipy.special import entr
from scipy.stats import kurtosis, skew

from continual.errors import EmptyHistogramError
from continual.model import Activations, GradientVector, ToySegModel, backward, embed, forward, loss_ce
from continual.types import ClassHistogram, Image, LabelMap, Sample, class_histogram, histogram_distribution

logger = logging.getLogger(__name__)

# MSCN window: 7x7 Gaussian, sigma 7/6, stabiliser for [0, 1] intensities
MSCN_SIGMA = 7.0 / 6.0
MSCN_C = 1.0 / 255.0

CSV_COLUMNS = ("sample_id", "task_id", "loss", "entropy", "tv_image", "tv_label", "naturalness",
               "distinct_classes", "uniformity_distance")


class ScoreKind(str, Enum):
    LOSS = "loss"
    ENTROPY = "entropy"
    TV_IMAGE = "tv_image"
    TV_LABEL = "tv_label"
    NATURALNESS = "naturalness"
    CLASS_STATS = "class_stats"
    EMBEDDING = "embedding"
    GRADIENT = "gradient"


CHEAP_KINDS = frozenset(ScoreKind) - {ScoreKind.GRADIENT}


@dataclass(frozen=True)
class SampleScores:
    sample_id: int
    sample: Sample | None = None
    loss: float | None = None
    entropy: float | None = None
    tv_image: float | None = None
    tv_label: float | None = None
    naturalness: float | None = None
    distinct_classes: int | None = None
    # None marks a sample without labeled pixels (ineligible for class balancing)
    uniformity_distance: float | None = None
    histogram: ClassHistogram | None = None
    embedding: np.ndarray | None = None
    gradient: GradientVector | None = None


def image_entropy(acts: Activations) -> float:
    """Mean Shannon entropy (nats) of the posterior over all pixels."""
    return float(entr(acts.posterior).sum(axis=1).mean())


def total_variation(grid: Image | LabelMap) -> float:
    """Anisotropic total variation over horizontal and vertical neighbours.

    Images are compared on luminance (mean of channels); label maps count the
    neighbouring pairs whose values differ, IGNORE included as a value.
    """
    if isinstance(grid, Image):
        lum = grid.luminance()
        return float(np.abs(np.diff(lum, axis=0)).sum() + np.abs(np.diff(lum, axis=1)).sum())
    data = grid.data
    return float(np.count_nonzero(data[1:, :] != data[:-1, :]) + np.count_nonzero(data[:, 1:] != data[:, :-1]))


def mscn_coefficients(image: Image) -> np.ndarray:
    lum = image.luminance()
    mu = ndimage.gaussian_filter(lum, MSCN_SIGMA, mode="reflect", truncate=3.0 / MSCN_SIGMA)
    second = ndimage.gaussian_filter(lum * lum, MSCN_SIGMA, mode="reflect", truncate=3.0 / MSCN_SIGMA)
    sigma = np.sqrt(np.abs(second - mu * mu))
    return (lum - mu) / (sigma + MSCN_C)


def naturalness_score(image: Image) -> float:
    """Distance of the MSCN moment profile from a Gaussian: |kurtosis - 3| + |skewness|.

    A degenerate (constant) MSCN field is scored as a point mass: 3.
    """
    coeffs = mscn_coefficients(image).ravel()
    if coeffs.var() < 1e-12:
        return 3.0
    return float(abs(kurtosis(coeffs, fisher=False) - 3.0) + abs(skew(coeffs)))


def cosine_distance(u: np.ndarray, v: np.ndarray) -> float:
    """1 - cosine similarity, in [0, 2]; 1 when either vector has zero norm."""
    if np.array_equal(u, v) and np.any(u):
        return 0.0
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        return 1.0
    return float(np.clip(1.0 - np.dot(u, v) / (nu * nv), 0.0, 2.0))


def perceptual_distance(a: Sample, b: Sample, model: ToySegModel) -> float:
    """Embedding cosine distance, standing in for a learned perceptual metric."""
    if np.array_equal(a.image.data, b.image.data):
        return 0.0
    return cosine_distance(embed(model, a.image), embed(model, b.image))


def uniformity_distance(h: ClassHistogram, classes: Iterable[int] | None = None) -> float:
    """L1 distance between the class distribution over ``classes`` and uniform."""
    classes = sorted(classes) if classes is not None else list(range(h.num_classes))
    restricted = ClassHistogram(h.counts[classes], len(classes))
    p = histogram_distribution(restricted)
    return float(np.abs(p - 1.0 / len(classes)).sum())


def score_sample(model: ToySegModel, sample: Sample, required: frozenset[ScoreKind],
                 classes: Sequence[int] | None = None) -> SampleScores:
    acts = forward(model, sample.image) if required & {ScoreKind.LOSS, ScoreKind.ENTROPY, ScoreKind.EMBEDDING} else None
    values: dict = {"sample_id": sample.id, "sample": sample}
    if ScoreKind.LOSS in required:
        values["loss"] = loss_ce(acts, sample.labels).loss
    if ScoreKind.ENTROPY in required:
        values["entropy"] = image_entropy(acts)
    if ScoreKind.EMBEDDING in required:
        values["embedding"] = acts.h2.mean(axis=0)
    if ScoreKind.TV_IMAGE in required:
        values["tv_image"] = total_variation(sample.image)
    if ScoreKind.TV_LABEL in required:
        values["tv_label"] = total_variation(sample.labels)
    if ScoreKind.NATURALNESS in required:
        values["naturalness"] = naturalness_score(sample.image)
    if ScoreKind.CLASS_STATS in required:
        num_classes = model.num_classes
        histogram = class_histogram(sample.labels, num_classes)
        values["histogram"] = histogram
        values["distinct_classes"] = histogram.distinct
        try:
            values["uniformity_distance"] = uniformity_distance(histogram, classes)
        except EmptyHistogramError:
            values["uniformity_distance"] = None
    if ScoreKind.GRADIENT in required:
        values["gradient"] = backward(model, sample.image, sample.labels)
    return SampleScores(**values)


def score_dataset(model: ToySegModel, samples: Sequence[Sample],
                  required: Iterable[ScoreKind] | None = None,
                  classes: Sequence[int] | None = None) -> list[SampleScores]:
    """Score every sample; gradients only when ``ScoreKind.GRADIENT`` is required.

    ``classes`` restricts the uniformity distance to the task's labeled classes.
    """
    kinds = frozenset(required) if required is not None else CHEAP_KINDS
    scores = [score_sample(model, sample, kinds, classes) for sample in samples]
    logger.debug("scored %d samples (%s)", len(scores), ", ".join(sorted(k.value for k in kinds)))
    return scores


def write_scores_csv(scores: Sequence[SampleScores], path: str | Path) -> None:
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(CSV_COLUMNS)
        for s in scores:
            row = [s.sample_id, s.sample.task_id if s.sample is not None else ""]
            row += ["" if v is None else v for v in (s.loss, s.entropy, s.tv_image, s.tv_label,
                                                     s.naturalness, s.distinct_classes, s.uniformity_distance)]
            writer.writerow(row)
