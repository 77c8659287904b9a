"""Validated configuration models and the JSON records the engine writes."""
from __future__ import annotations

from enum import Enum
from pathlib import Path
from typing import Any, Literal

from dotenv import dotenv_values
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from continual.errors import ConfigError
from continual.types import ScenarioKind


class PolicyId(str, Enum):
    NONE = "none"
    RANDOM = "random"
    LOSS_MIN = "loss_min"
    LOSS_MAX = "loss_max"
    LOSS_MEDIAN = "loss_median"
    LOSS_MEAN = "loss_mean"
    ENTROPY_MIN = "entropy_min"
    ENTROPY_MAX = "entropy_max"
    ENTROPY_MEAN = "entropy_mean"
    BRISQUE = "brisque"
    TV_LABEL = "tv_label"
    TV_IMAGE = "tv_image"
    AMBIVALENT = "ambivalent"
    CLASS_BAL_SAMPLES = "class_bal_samples"
    CLASS_BAL_BUFFER = "class_bal_buffer"
    DIV_CLASS_BAL = "div_class_bal"
    GSS = "gss"
    RSS = "rss"


Direction = Literal["min", "max"]


def build(model: type[BaseModel], data: dict[str, Any]):
    """Validate ``data`` into ``model``, reporting failures as ConfigError."""
    try:
        return model.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(str(exc)) from exc


class SelectionPolicy(BaseModel):
    model_config = ConfigDict(frozen=True)

    id: PolicyId = PolicyId.RANDOM
    th: float = Field(0.6, gt=0.0, le=2.0)
    cmp: int = Field(5, ge=1)
    reduced_dim: int = Field(2, ge=1)
    direction: Direction | None = None

    def resolved_direction(self) -> Direction:
        if self.direction is not None:
            return self.direction
        if self.id in (PolicyId.TV_LABEL, PolicyId.TV_IMAGE, PolicyId.AMBIVALENT):
            return "max"
        return "min"

    def params(self) -> dict[str, Any]:
        """The parameters that matter for this policy, for reports."""
        if self.id == PolicyId.GSS:
            return {"cmp": self.cmp}
        if self.id == PolicyId.RSS:
            return {"d": self.reduced_dim}
        if self.id == PolicyId.DIV_CLASS_BAL:
            return {"th": self.th}
        if self.id in (PolicyId.BRISQUE, PolicyId.TV_LABEL, PolicyId.TV_IMAGE, PolicyId.AMBIVALENT):
            return {"direction": self.resolved_direction()}
        return {}


class DomainParams(BaseModel):
    model_config = ConfigDict(frozen=True)

    palette_rotation: float = 0.0  # degrees, around the grey axis
    noise_sigma: float = Field(0.0, ge=0.0)
    blur_radius: int = Field(0, ge=0)


class ScenarioSpec(BaseModel):
    kind: ScenarioKind
    num_classes: int = Field(10, ge=2, le=254)
    height: int = Field(32, ge=8)
    width: int = Field(32, ge=8)
    train_per_task: list[int]
    val_per_task: list[int]
    labeled_classes: list[list[int]]
    exclusive_classes: list[int] = []
    exclusive_task: int = 1
    domains: list[DomainParams]
    class_weights: list[float]
    objects_per_image: tuple[int, int] = (2, 5)
    object_scale: tuple[float, float] = (0.2, 0.45)
    background_class: int = 0
    texture_noise: float = Field(0.03, ge=0.0)

    @property
    def num_tasks(self) -> int:
        return len(self.labeled_classes)

    @model_validator(mode="after")
    def check_structure(self) -> ScenarioSpec:
        tasks = self.num_tasks
        if tasks == 0:
            raise ValueError("scenario needs at least one task")
        for name in ("train_per_task", "val_per_task", "domains"):
            if len(getattr(self, name)) != tasks:
                raise ValueError(f"{name} must have one entry per task ({tasks})")
        if len(self.class_weights) != self.num_classes:
            raise ValueError("class_weights must have one entry per class")
        every = [c for group in self.labeled_classes for c in group] + self.exclusive_classes
        if any(c < 0 or c >= self.num_classes for c in every):
            raise ValueError(f"scenario uses class ids outside 0..{self.num_classes - 1}")
        if self.background_class >= self.num_classes:
            raise ValueError("background class outside the class set")
        full = set(range(self.num_classes))
        if self.kind == ScenarioKind.CLASS_INCREMENTAL:
            flat = [c for group in self.labeled_classes for c in group]
            if len(flat) != len(set(flat)):
                raise ValueError("class-incremental labeled sets must be disjoint")
            if flat != list(range(self.num_classes)):
                raise ValueError(
                    "class-incremental labeled sets must introduce classes 0..C-1 in order"
                )
            if self.exclusive_classes:
                if not 0 <= self.exclusive_task < tasks:
                    raise ValueError("exclusive_task out of range")
                if not set(self.exclusive_classes) <= set(self.labeled_classes[self.exclusive_task]):
                    raise ValueError("exclusive classes must be labeled in the exclusive task")
                if self.background_class in self.exclusive_classes:
                    raise ValueError("background cannot be exclusive")
        else:
            if any(set(group) != full for group in self.labeled_classes):
                raise ValueError("domain-incremental tasks must label the full class set")
            if self.exclusive_classes:
                raise ValueError("exclusive classes only exist in class-incremental scenarios")
        low, high = self.objects_per_image
        if not 0 <= low <= high:
            raise ValueError("objects_per_image must be an ordered pair")
        return self

    @classmethod
    def class_incremental(cls, **overrides) -> ScenarioSpec:
        weights = [1.0] + [round(1.0 - 0.9 * i / 8, 4) for i in range(9)]
        data = dict(
            kind=ScenarioKind.CLASS_INCREMENTAL,
            train_per_task=[200, 200, 200],
            val_per_task=[50, 50, 50],
            labeled_classes=[[0, 1, 2, 3], [4, 5, 6], [7, 8, 9]],
            exclusive_classes=[5, 6],
            exclusive_task=1,
            domains=[DomainParams()] * 3,
            class_weights=weights,
        )
        data.update(overrides)
        return build(cls, data)

    @classmethod
    def domain_incremental(cls, **overrides) -> ScenarioSpec:
        weights = [1.0] + [round(1.0 - 0.9 * i / 8, 4) for i in range(9)]
        data = dict(
            kind=ScenarioKind.DOMAIN_INCREMENTAL,
            train_per_task=[200, 200],
            val_per_task=[50, 50],
            labeled_classes=[list(range(10))] * 2,
            domains=[
                DomainParams(),
                DomainParams(palette_rotation=90.0, noise_sigma=0.05, blur_radius=1),
            ],
            class_weights=weights,
        )
        data.update(overrides)
        return build(cls, data)


class RunConfig(BaseModel):
    name: str | None = None
    seed: int = 0
    patch_size: int = Field(5, ge=1)
    hidden_widths: tuple[int, int] = (64, 32)
    num_classes: int = Field(10, ge=2)
    epochs: int = Field(30, ge=0)
    batch_size: int = Field(8, ge=1)
    learning_rate: float = Field(4e-4, gt=0.0)
    poly_power: float = Field(0.9, gt=0.0)
    buffer_size: int = Field(64, ge=0)
    policy: PolicyId = PolicyId.RANDOM
    th: float = Field(0.6, gt=0.0, le=2.0)
    cmp: int = Field(5, ge=1)
    rss_dim: int = Field(2, ge=1)
    direction: Direction | None = None
    replay_mix: Literal["concat", "ratio"] = "concat"
    replay_ratio: float = Field(0.5, gt=0.0, lt=1.0)
    distillation: Literal["auto", "on", "off"] = "auto"
    distill_weight: float = Field(1.0, ge=0.0)
    cka_pixels: int = Field(2000, ge=2)

    @field_validator("hidden_widths", mode="before")
    @classmethod
    def split_widths(cls, value):
        if isinstance(value, str):
            return tuple(int(part) for part in value.split(",") if part.strip())
        return value

    @field_validator("direction", mode="before")
    @classmethod
    def blank_direction(cls, value):
        return None if value in ("", "auto") else value

    @property
    def selection_policy(self) -> SelectionPolicy:
        return SelectionPolicy(
            id=self.policy, th=self.th, cmp=self.cmp, reduced_dim=self.rss_dim, direction=self.direction
        )

    def uses_distillation(self, kind: ScenarioKind) -> bool:
        if self.distillation == "auto":
            return kind == ScenarioKind.CLASS_INCREMENTAL and self.policy != PolicyId.NONE
        return self.distillation == "on"

    @classmethod
    def from_file(cls, path: str | Path, **overrides) -> RunConfig:
        """Read a ``KEY=value`` config file; ``overrides`` win over file values."""
        values = {key.lower(): value for key, value in dotenv_values(path).items() if value is not None}
        values.update({key: value for key, value in overrides.items() if value is not None})
        return build(cls, values)


class ManifestEntry(BaseModel):
    sample_id: int
    task_id: int
    score: float | None = None


class BufferManifest(BaseModel):
    capacity: int
    policy: str
    quotas: list[int]
    entries: list[ManifestEntry]
    histogram: list[int]
    warnings: list[str] = []


class SampleRecord(BaseModel):
    id: int
    task_id: int
    split: Literal["train", "val"]
    channels: int
    height: int
    width: int
    has_true_labels: bool = False


class TaskRecord(BaseModel):
    task_id: int
    labeled_classes: list[int]
    exclusive_classes: list[int] = []
    train_ids: list[int]
    val_ids: list[int]


class DatasetIndex(BaseModel):
    scenario: ScenarioKind
    num_classes: int
    class_names: list[str]
    image_format: str = "float32-le-chw"
    label_format: str = "uint8-hw"
    tasks: list[TaskRecord]
    samples: list[SampleRecord]


class CheckpointHeader(BaseModel):
    patch_size: int
    input_dim: int
    hidden_widths: tuple[int, int]
    num_classes: int
    step: int = 0
    dtype: str = "float32"
    byte_order: str = "little"
    param_order: list[str] = ["W1", "b1", "W2", "b2", "W3", "b3"]


class StepMetrics(BaseModel):
    step: int
    task_id: int
    seen_classes: list[int]
    subset_miou: dict[str, float | None]
    all_miou: float | None
    per_class_iou: dict[str, float | None]
    excluded_classes: list[int]
    task_miou: list[float | None]
    task_miou_average: float | None
    exclusive_miou: float | None = None
    recency_bias: float | None = None
    exclusive_recency_bias: float | None = None
    loss_trace: list[float] = []
    buffer_entries: int = 0


class CkaRecord(BaseModel):
    step: int
    layer: str
    value: float


class RunMetrics(BaseModel):
    name: str
    mode: Literal["continual", "offline"]
    scenario: ScenarioKind
    dataset_hash: str
    epochs_per_task: int
    policy: str
    policy_params: dict[str, Any]
    buffer_size: int
    seed: int
    distillation: bool
    steps: list[StepMetrics] = []
    cka: list[CkaRecord] = []
    invariant_violations: list[str] = []
    error: str | None = None


class GridCell(BaseModel):
    policy: PolicyId
    params: dict[str, Any] = {}
    buffer_size: int = Field(64, ge=0)
    seed: int = 0

    @property
    def label(self) -> str:
        extra = "_".join(f"{k}{v}" for k, v in sorted(self.params.items()))
        return "_".join(part for part in (self.policy.value, extra, f"M{self.buffer_size}", f"s{self.seed}") if part)


class ExperimentGrid(BaseModel):
    name: str = "grid"
    base: RunConfig = RunConfig()
    scenario: ScenarioSpec
    data_seed: int = 0
    workers: int = Field(1, ge=1)
    cells: list[GridCell]

    @model_validator(mode="after")
    def check_cells(self) -> ExperimentGrid:
        if not self.cells:
            raise ValueError("grid has no cells")
        return self

    @classmethod
    def from_file(cls, path: str | Path) -> ExperimentGrid:
        try:
            return cls.model_validate_json(Path(path).read_text())
        except ValidationError as exc:
            raise ConfigError(str(exc)) from exc
