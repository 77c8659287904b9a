"""Procedural segmentation scenes arranged as class- or domain-incremental task sequences.

Every object class has a fixed shape kind and base colour, so a small per-pixel
model can learn it. Each sample draws from its own id-indexed substream, which
keeps generation independent of iteration order.
"""
from __future__ import annotations

import colorsys
import logging
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from continual.schemas import DomainParams, ScenarioSpec
from continual.types import IGNORE, Image, LabelMap, Rng, Sample, ScenarioKind, TaskDef

logger = logging.getLogger(__name__)

SHAPE_KINDS = ("rectangle", "disc", "triangle", "ring", "stripe-band")


@dataclass(frozen=True)
class PlacedObject:
    kind: str
    class_id: int
    y: int
    x: int
    h: int
    w: int
    color: tuple[float, float, float]


@dataclass(frozen=True)
class SceneSpec:
    height: int
    width: int
    background_class: int
    background_color: tuple[float, float, float]
    objects: tuple[PlacedObject, ...] = ()
    domain: DomainParams = DomainParams()
    labeled_classes: frozenset[int] | None = None
    texture_noise: float = 0.0

    def __post_init__(self):
        for obj in self.objects:
            if obj.y < 0 or obj.x < 0 or obj.y + obj.h > self.height or obj.x + obj.w > self.width:
                raise ValueError(f"object of class {obj.class_id} lies outside the canvas")


def class_color(class_id: int, num_classes: int) -> np.ndarray:
    if class_id == 0:
        return np.array([0.45, 0.45, 0.45])
    hue = (class_id - 1) / max(num_classes - 1, 1)
    value = 0.9 if class_id % 2 else 0.65
    return np.array(colorsys.hsv_to_rgb(hue, 0.8, value))


def shape_for(class_id: int) -> str:
    return SHAPE_KINDS[(class_id - 1) % len(SHAPE_KINDS)]


def class_names(spec: ScenarioSpec) -> list[str]:
    return [
        "background" if c == spec.background_class else f"{shape_for(c)}_{c}"
        for c in range(spec.num_classes)
    ]


def shape_mask(obj: PlacedObject, yy: np.ndarray, xx: np.ndarray) -> np.ndarray:
    inside = (yy >= obj.y) & (yy < obj.y + obj.h) & (xx >= obj.x) & (xx < obj.x + obj.w)
    cy = obj.y + (obj.h - 1) / 2.0
    cx = obj.x + (obj.w - 1) / 2.0
    radius = min(obj.h, obj.w) / 2.0
    dist2 = (yy - cy) ** 2 + (xx - cx) ** 2
    if obj.kind == "rectangle":
        return inside
    if obj.kind == "disc":
        return dist2 <= radius**2
    if obj.kind == "ring":
        return (dist2 <= radius**2) & (dist2 >= (radius / 2.0) ** 2)
    if obj.kind == "triangle":
        half = (yy - obj.y + 0.5) / obj.h * (obj.w / 2.0)
        return inside & (np.abs(xx - cx) <= half)
    if obj.kind == "stripe-band":
        return inside & (((yy - obj.y) // 2) % 2 == 0)
    raise ValueError(f"unknown shape kind {obj.kind!r}")


def rotate_palette(image: np.ndarray, degrees: float) -> np.ndarray:
    """Rotate every RGB vector about the grey axis through mid-grey."""
    if degrees == 0.0:
        return image
    theta = np.deg2rad(degrees)
    axis = np.ones(3) / np.sqrt(3.0)
    cross = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    rotation = np.eye(3) + np.sin(theta) * cross + (1 - np.cos(theta)) * cross @ cross
    centered = image - 0.5
    return np.einsum("ij,jhw->ihw", rotation, centered) + 0.5


def apply_domain(image: np.ndarray, domain: DomainParams, rng: Rng) -> np.ndarray:
    image = rotate_palette(image, domain.palette_rotation)
    if domain.blur_radius > 0:
        size = 2 * domain.blur_radius + 1
        image = ndimage.uniform_filter(image, size=(1, size, size), mode="nearest")
    if domain.noise_sigma > 0:
        image = image + rng.normal(0.0, domain.noise_sigma, size=image.shape)
    return image


def render_sample(scene: SceneSpec, rng: Rng) -> tuple[Image, LabelMap, LabelMap]:
    """Paint objects in order; later objects occlude earlier ones."""
    height, width = scene.height, scene.width
    yy, xx = np.mgrid[0:height, 0:width]
    truth = np.full((height, width), scene.background_class, dtype=np.uint8)
    canvas = np.broadcast_to(np.asarray(scene.background_color)[:, None, None], (3, height, width)).copy()
    for obj in scene.objects:
        mask = shape_mask(obj, yy, xx)
        truth[mask] = obj.class_id
        canvas[:, mask] = np.asarray(obj.color)[:, None]
    if scene.texture_noise > 0:
        canvas = canvas + rng.normal(0.0, scene.texture_noise, size=canvas.shape)
    canvas = np.clip(apply_domain(canvas, scene.domain, rng), 0.0, 1.0)
    true_labels = LabelMap(truth)
    if scene.labeled_classes is None:
        labels = true_labels
    else:
        labels = true_labels.restricted_to(scene.labeled_classes)
    return Image(canvas.astype(np.float32)), labels, true_labels


def _scene_for(spec: ScenarioSpec, task_index: int, allowed: np.ndarray, weights: np.ndarray,
               labeled: frozenset[int] | None, rng: Rng) -> SceneSpec:
    height, width = spec.height, spec.width
    low, high = spec.objects_per_image
    count = int(rng.integers(low, high + 1))
    objects = []
    for _ in range(count if allowed.size else 0):
        class_id = int(rng.choice(allowed, p=weights))
        scale_low, scale_high = spec.object_scale
        h = max(2, min(height, int(round(rng.uniform(scale_low, scale_high) * height))))
        w = max(2, min(width, int(round(rng.uniform(scale_low, scale_high) * width))))
        y = int(rng.integers(0, height - h + 1))
        x = int(rng.integers(0, width - w + 1))
        color = np.clip(class_color(class_id, spec.num_classes) + rng.normal(0.0, 0.04, 3), 0.0, 1.0)
        objects.append(PlacedObject(shape_for(class_id), class_id, y, x, h, w, tuple(float(v) for v in color)))
    background = np.clip(class_color(spec.background_class, spec.num_classes) + rng.normal(0.0, 0.03, 3), 0.0, 1.0)
    return SceneSpec(
        height=height,
        width=width,
        background_class=spec.background_class,
        background_color=tuple(float(v) for v in background),
        objects=tuple(objects),
        domain=spec.domains[task_index],
        labeled_classes=labeled,
        texture_noise=spec.texture_noise,
    )


def allowed_object_classes(spec: ScenarioSpec, task_index: int) -> list[int]:
    classes = [c for c in range(spec.num_classes) if c != spec.background_class]
    if spec.kind == ScenarioKind.CLASS_INCREMENTAL and task_index != spec.exclusive_task:
        classes = [c for c in classes if c not in spec.exclusive_classes]
    return classes


def generate_scenario(spec: ScenarioSpec, rng: Rng) -> list[TaskDef]:
    data = rng.substream("data")
    tasks: list[TaskDef] = []
    next_id = 0
    for k in range(spec.num_tasks):
        allowed = np.array(allowed_object_classes(spec, k), dtype=np.int64)
        weights = np.array([spec.class_weights[c] for c in allowed], dtype=np.float64)
        weights = weights / weights.sum() if weights.size else weights
        labeled = frozenset(spec.labeled_classes[k])
        splits: dict[str, list[Sample]] = {"train": [], "val": []}
        for split, size in (("train", spec.train_per_task[k]), ("val", spec.val_per_task[k])):
            for _ in range(size):
                sample_rng = data.substream("sample", next_id)
                scene = _scene_for(spec, k, allowed, weights, labeled, sample_rng)
                image, labels, truth = render_sample(scene, sample_rng)
                splits[split].append(Sample(next_id, image, labels, k, truth))
                next_id += 1
        tasks.append(TaskDef(
            task_id=k,
            train_samples=splits["train"],
            val_samples=splits["val"],
            labeled_classes=labeled,
            scenario=spec.kind,
            exclusive_classes=frozenset(spec.exclusive_classes) if k == spec.exclusive_task else frozenset(),
        ))
        logger.debug("task %d: %d train / %d val samples", k, len(splits["train"]), len(splits["val"]))
    return tasks


def pixel_frequencies(tasks: list[TaskDef], num_classes: int) -> np.ndarray:
    """True-class pixel counts per task (rows) over train and val samples."""
    counts = np.zeros((len(tasks), num_classes), dtype=np.int64)
    for row, task in enumerate(tasks):
        for sample in task.train_samples + task.val_samples:
            truth = sample.full_labels.data
            counts[row] += np.bincount(truth[truth != IGNORE].astype(np.int64), minlength=num_classes)
    return counts
