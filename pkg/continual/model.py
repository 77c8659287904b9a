"""Per-pixel segmentation model: three dense layers over zero-padded k×k patches.

Parameters are kept as float32 (the checkpoint precision) and every computation
runs in float64. Gradients are derived by hand; the flat parameter order is
``W1, b1, W2, b2, W3, b3``, each flattened row-major.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Literal, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import softmax

from continual.errors import ConfigError, InvalidLabelError, ShapeError
from continual.schemas import CheckpointHeader
from continual.types import IGNORE, Image, LabelMap, Rng, Sample

logger = logging.getLogger(__name__)

PARAM_ORDER = ("W1", "b1", "W2", "b2", "W3", "b3")
LAYERS = ("input", "h1", "h2", "logits")
PROB_EPS = 1e-12

LossKind = Literal["ce", "cil"]


@dataclass(frozen=True)
class ToySegModel:
    params: dict[str, np.ndarray]
    patch_size: int
    channels: int = 3

    def __post_init__(self):
        if self.patch_size % 2 == 0:
            raise ConfigError("patch size must be odd")
        p = self.params
        if p["W1"].shape[0] != self.channels * self.patch_size**2:
            raise ShapeError("W1 rows must equal channels * patch_size**2")
        if (p["b1"].shape != (p["W1"].shape[1],) or p["W2"].shape[0] != p["W1"].shape[1]
                or p["b2"].shape != (p["W2"].shape[1],) or p["W3"].shape[0] != p["W2"].shape[1]
                or p["b3"].shape != (p["W3"].shape[1],)):
            raise ShapeError("inconsistent layer dimensions")

    @property
    def input_dim(self) -> int:
        return self.params["W1"].shape[0]

    @property
    def hidden_widths(self) -> tuple[int, int]:
        return self.params["W1"].shape[1], self.params["W2"].shape[1]

    @property
    def num_classes(self) -> int:
        return self.params["W3"].shape[1]

    @property
    def num_parameters(self) -> int:
        return sum(self.params[name].size for name in PARAM_ORDER)

    def flat(self) -> np.ndarray:
        return np.concatenate([self.params[name].astype(np.float64).ravel() for name in PARAM_ORDER])

    def with_flat(self, vector: np.ndarray) -> ToySegModel:
        """New model from a flat vector; each parameter keeps its dtype."""
        if vector.shape != (self.num_parameters,):
            raise ShapeError("flat parameter vector has the wrong length")
        params, offset = {}, 0
        for name in PARAM_ORDER:
            current = self.params[name]
            params[name] = vector[offset:offset + current.size].reshape(current.shape).astype(current.dtype)
            offset += current.size
        return ToySegModel(params, self.patch_size, self.channels)

    def copy(self) -> ToySegModel:
        return ToySegModel({k: v.copy() for k, v in self.params.items()}, self.patch_size, self.channels)

    def same_architecture(self, other: ToySegModel) -> bool:
        return (self.patch_size, self.channels, self.hidden_widths) == (
            other.patch_size, other.channels, other.hidden_widths)


@dataclass(frozen=True)
class Activations:
    features: np.ndarray
    h1: np.ndarray
    h2: np.ndarray
    logits: np.ndarray
    posterior: np.ndarray
    height: int
    width: int

    def layer(self, name: str) -> np.ndarray:
        return self.features if name == "input" else getattr(self, name)

    def predictions(self) -> LabelMap:
        return LabelMap(self.posterior.argmax(axis=1).reshape(self.height, self.width))


@dataclass(frozen=True)
class GradientVector:
    values: np.ndarray
    norm: float

    @classmethod
    def from_parts(cls, parts: dict[str, np.ndarray]) -> GradientVector:
        values = np.concatenate([parts[name].ravel() for name in PARAM_ORDER])
        return cls(values, float(np.linalg.norm(values)))


@dataclass(frozen=True)
class LossResult:
    loss: float
    pixel_loss: np.ndarray
    labeled_pixels: int


@dataclass(frozen=True)
class CilLoss:
    total: float
    labeled_term: float
    distill_term: float
    labeled_pixels: int
    ignored_pixels: int


def init_model(num_classes: int, rng: Rng, patch_size: int = 5,
               hidden_widths: tuple[int, int] = (64, 32), channels: int = 3) -> ToySegModel:
    """He-initialised weights, zero biases."""
    h1, h2 = hidden_widths
    input_dim = channels * patch_size**2
    params = {
        "W1": rng.normal(0.0, np.sqrt(2.0 / input_dim), (input_dim, h1)),
        "b1": np.zeros(h1),
        "W2": rng.normal(0.0, np.sqrt(2.0 / h1), (h1, h2)),
        "b2": np.zeros(h2),
        "W3": rng.normal(0.0, np.sqrt(1.0 / h2), (h2, num_classes)),
        "b3": np.zeros(num_classes),
    }
    return ToySegModel({k: v.astype(np.float32) for k, v in params.items()}, patch_size, channels)


def zero_model(num_classes: int, patch_size: int = 5, hidden_widths: tuple[int, int] = (64, 32),
               channels: int = 3) -> ToySegModel:
    h1, h2 = hidden_widths
    input_dim = channels * patch_size**2
    shapes = {"W1": (input_dim, h1), "b1": (h1,), "W2": (h1, h2), "b2": (h2,),
              "W3": (h2, num_classes), "b3": (num_classes,)}
    return ToySegModel({k: np.zeros(s, dtype=np.float32) for k, s in shapes.items()}, patch_size, channels)


def grow_head(model: ToySegModel, num_classes: int) -> ToySegModel:
    """Append zero-initialised logit columns up to ``num_classes``."""
    extra = num_classes - model.num_classes
    if extra < 0:
        raise ConfigError("the output head can only grow")
    params = dict(model.params)
    params["W3"] = np.concatenate(
        [model.params["W3"], np.zeros((model.params["W3"].shape[0], extra), model.params["W3"].dtype)], axis=1)
    params["b3"] = np.concatenate([model.params["b3"], np.zeros(extra, model.params["b3"].dtype)])
    return ToySegModel(params, model.patch_size, model.channels)


def extract_patches(image: Image, patch_size: int) -> np.ndarray:
    """(H*W, C*k*k) matrix of zero-padded patches, channel-major within a row."""
    pad = patch_size // 2
    padded = np.pad(image.data.astype(np.float64), ((0, 0), (pad, pad), (pad, pad)))
    windows = sliding_window_view(padded, (patch_size, patch_size), axis=(1, 2))
    channels, height, width = image.data.shape
    return windows.transpose(1, 2, 0, 3, 4).reshape(height * width, channels * patch_size**2)


def _layers(model: ToySegModel, features: np.ndarray):
    p = {k: v.astype(np.float64) for k, v in model.params.items()}
    h1 = np.maximum(features @ p["W1"] + p["b1"], 0.0)
    h2 = np.maximum(h1 @ p["W2"] + p["b2"], 0.0)
    logits = h2 @ p["W3"] + p["b3"]
    return h1, h2, logits, softmax(logits, axis=1)


def forward(model: ToySegModel, image: Image) -> Activations:
    if image.channels != model.channels:
        raise ShapeError(f"model expects {model.channels} channels, image has {image.channels}")
    features = extract_patches(image, model.patch_size)
    h1, h2, logits, posterior = _layers(model, features)
    return Activations(features, h1, h2, logits, posterior, image.height, image.width)


def _flat_labels(labels: LabelMap, acts: Activations) -> np.ndarray:
    if (labels.height, labels.width) != (acts.height, acts.width):
        raise ShapeError("label map and activations differ in shape")
    flat = labels.data.ravel().astype(np.int64)
    labeled = flat[flat != IGNORE]
    if labeled.size and labeled.max() >= acts.posterior.shape[1]:
        raise InvalidLabelError(f"label {int(labeled.max())} has no output column")
    return flat


def loss_ce(acts: Activations, labels: LabelMap) -> LossResult:
    """Mean cross-entropy over labeled pixels; an all-IGNORE map scores 0."""
    flat = _flat_labels(labels, acts)
    mask = flat != IGNORE
    pixel = np.zeros(flat.shape[0])
    count = int(mask.sum())
    if count:
        true_prob = acts.posterior[np.flatnonzero(mask), flat[mask]]
        pixel[mask] = -np.log(np.maximum(true_prob, PROB_EPS))
    loss = float(pixel.sum() / count) if count else 0.0
    return LossResult(loss, pixel.reshape(acts.height, acts.width), count)


def _old_distributions(student_logits: np.ndarray, teacher_posterior: np.ndarray, old: np.ndarray):
    target = teacher_posterior[:, old]
    target = target / target.sum(axis=1, keepdims=True)
    restricted = softmax(student_logits[:, old], axis=1)
    return target, restricted


def loss_cil(student: Activations, teacher: Activations | None, labels: LabelMap,
             old_classes: Sequence[int], weight: float = 1.0) -> CilLoss:
    """Cross-entropy on labeled pixels plus distillation of old classes on IGNORE pixels.

    The distillation term is the mean over IGNORE pixels of the cross-entropy
    between the teacher posterior and the student posterior, both renormalised
    over ``old_classes``.
    """
    ce = loss_ce(student, labels)
    old = np.array(sorted(old_classes), dtype=np.int64)
    flat = labels.data.ravel()
    ignored = np.flatnonzero(flat == IGNORE)
    if old.size == 0:
        return CilLoss(ce.loss, ce.loss, 0.0, ce.labeled_pixels, ignored.size)
    if teacher is None:
        raise ConfigError("distillation over old classes needs a teacher")
    distill = 0.0
    if ignored.size:
        target, restricted = _old_distributions(
            student.logits[ignored], teacher.posterior[ignored], old)
        distill = float(-(target * np.log(np.maximum(restricted, PROB_EPS))).sum(axis=1).mean())
    return CilLoss(ce.loss + weight * distill, ce.loss, distill, ce.labeled_pixels, ignored.size)


def _logit_gradient(logits: np.ndarray, posterior: np.ndarray, flat_labels: np.ndarray,
                    teacher_posterior: np.ndarray | None, old: np.ndarray, weight: float):
    """Loss of one sample and its gradient with respect to that sample's logits."""
    grad = np.zeros_like(logits)
    mask = flat_labels != IGNORE
    labeled = np.flatnonzero(mask)
    loss = 0.0
    if labeled.size:
        rows = posterior[labeled]
        target = flat_labels[labeled]
        loss = float(-np.log(np.maximum(rows[np.arange(labeled.size), target], PROB_EPS)).mean())
        g = rows.copy()
        g[np.arange(labeled.size), target] -= 1.0
        grad[labeled] = g / labeled.size
    if teacher_posterior is not None and old.size:
        ignored = np.flatnonzero(~mask)
        if ignored.size:
            target, restricted = _old_distributions(logits[ignored], teacher_posterior[ignored], old)
            loss += weight * float(-(target * np.log(np.maximum(restricted, PROB_EPS))).sum(axis=1).mean())
            grad[np.ix_(ignored, old)] += weight * (restricted - target) / ignored.size
    return loss, grad


def _parameter_gradient(model: ToySegModel, features, h1, h2, grad_logits) -> GradientVector:
    w2 = model.params["W2"].astype(np.float64)
    w3 = model.params["W3"].astype(np.float64)
    dz2 = (grad_logits @ w3.T) * (h2 > 0)
    dz1 = (dz2 @ w2.T) * (h1 > 0)
    return GradientVector.from_parts({
        "W1": features.T @ dz1, "b1": dz1.sum(axis=0),
        "W2": h1.T @ dz2, "b2": dz2.sum(axis=0),
        "W3": h2.T @ grad_logits, "b3": grad_logits.sum(axis=0),
    })


def loss_and_gradient(model: ToySegModel, samples: Sequence[Sample], teacher: ToySegModel | None = None,
                      old_classes: Sequence[int] = (), weight: float = 1.0) -> tuple[float, GradientVector]:
    """Mean per-sample loss of a batch and its exact gradient.

    Uses distillation (``loss_cil``) when ``old_classes`` is non-empty, plain
    cross-entropy otherwise.
    """
    if not samples:
        raise ConfigError("cannot compute a gradient over an empty batch")
    old = np.array(sorted(old_classes), dtype=np.int64)
    if old.size and teacher is None:
        raise ConfigError("distillation over old classes needs a teacher")
    for sample in samples:
        if sample.image.channels != model.channels:
            raise ShapeError(f"model expects {model.channels} channels")
    features = np.vstack([extract_patches(s.image, model.patch_size) for s in samples])
    h1, h2, logits, posterior = _layers(model, features)
    teacher_posterior = _layers(teacher, features)[3] if old.size else None
    grad_logits = np.zeros_like(logits)
    total, offset = 0.0, 0
    for sample in samples:
        size = sample.labels.data.size
        block = slice(offset, offset + size)
        flat = sample.labels.data.ravel().astype(np.int64)
        if flat[flat != IGNORE].size and flat[flat != IGNORE].max() >= model.num_classes:
            raise InvalidLabelError(f"sample {sample.id} has labels beyond the output head")
        loss, grad = _logit_gradient(
            logits[block], posterior[block], flat,
            None if teacher_posterior is None else teacher_posterior[block], old, weight)
        total += loss
        grad_logits[block] = grad / len(samples)
        offset += size
    return total / len(samples), _parameter_gradient(model, features, h1, h2, grad_logits)


def backward(model: ToySegModel, image: Image, labels: LabelMap, loss_kind: LossKind = "ce",
             teacher: ToySegModel | None = None, old_classes: Sequence[int] = (),
             weight: float = 1.0) -> GradientVector:
    """Exact gradient of ``loss_ce`` or ``loss_cil`` for one image."""
    sample = Sample(-1, image, labels, 0)
    if loss_kind == "ce":
        return loss_and_gradient(model, [sample])[1]
    return loss_and_gradient(model, [sample], teacher, old_classes, weight)[1]


def embed(model: ToySegModel, image: Image) -> np.ndarray:
    """Spatial mean of the second hidden layer."""
    return forward(model, image).h2.mean(axis=0)


def save_checkpoint(model: ToySegModel, directory: str | Path, step: int = 0) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    blob = b"".join(model.params[name].astype("<f4").tobytes() for name in PARAM_ORDER)
    (directory / "model.bin").write_bytes(blob)
    header = CheckpointHeader(
        patch_size=model.patch_size, input_dim=model.input_dim,
        hidden_widths=model.hidden_widths, num_classes=model.num_classes, step=step,
    )
    (directory / "model.json").write_text(header.model_dump_json(indent=2))
    return directory


def load_checkpoint(directory: str | Path) -> tuple[ToySegModel, CheckpointHeader]:
    directory = Path(directory)
    header = CheckpointHeader.model_validate_json((directory / "model.json").read_text())
    h1, h2 = header.hidden_widths
    shapes = {"W1": (header.input_dim, h1), "b1": (h1,), "W2": (h1, h2), "b2": (h2,),
              "W3": (h2, header.num_classes), "b3": (header.num_classes,)}
    blob = np.frombuffer((directory / "model.bin").read_bytes(), dtype="<f4")
    expected = sum(int(np.prod(s)) for s in shapes.values())
    if blob.size != expected:
        raise ShapeError(f"checkpoint holds {blob.size} values, header describes {expected}")
    params, offset = {}, 0
    for name in header.param_order:
        size = int(np.prod(shapes[name]))
        params[name] = blob[offset:offset + size].reshape(shapes[name]).astype(np.float32)
        offset += size
    channels = header.input_dim // header.patch_size**2
    return ToySegModel(params, header.patch_size, channels), header
