"""On-disk dataset format.

Each sample is a pair of raw files: ``<id>.img`` holds the image as little-endian
float32 in channel-major order, ``<id>.lbl`` the label map as unsigned bytes.
Generator ground truth, when present, is stored as ``<id>.true.lbl``. The
directory's ``index.json`` (a ``DatasetIndex``) lists ids, shapes, class names
and task metadata.
"""
from __future__ import annotations

import hashlib
import logging
from pathlib import Path

import numpy as np

from continual.errors import ShapeError
from continual.schemas import DatasetIndex, SampleRecord, ScenarioSpec, TaskRecord
from continual.types import Image, LabelMap, Sample, ScenarioKind, TaskDef

logger = logging.getLogger(__name__)

INDEX_FILE = "index.json"
SCENARIO_FILE = "scenario.json"


def _write_sample(directory: Path, sample: Sample) -> None:
    (directory / f"{sample.id}.img").write_bytes(sample.image.data.astype("<f4").tobytes())
    (directory / f"{sample.id}.lbl").write_bytes(sample.labels.data.astype(np.uint8).tobytes())
    if sample.true_labels is not None:
        (directory / f"{sample.id}.true.lbl").write_bytes(sample.true_labels.data.tobytes())


def _read_sample(directory: Path, record: SampleRecord) -> Sample:
    shape = (record.channels, record.height, record.width)
    raw = np.frombuffer((directory / f"{record.id}.img").read_bytes(), dtype="<f4")
    if raw.size != np.prod(shape):
        raise ShapeError(f"sample {record.id}: image file does not match its recorded shape")
    image = Image(raw.reshape(shape).astype(np.float32))

    def labels(name: str) -> LabelMap:
        data = np.frombuffer((directory / name).read_bytes(), dtype=np.uint8)
        if data.size != record.height * record.width:
            raise ShapeError(f"sample {record.id}: {name} does not match its recorded shape")
        return LabelMap(data.reshape(record.height, record.width).copy())

    true_labels = labels(f"{record.id}.true.lbl") if record.has_true_labels else None
    return Sample(record.id, image, labels(f"{record.id}.lbl"), record.task_id, true_labels)


def write_dataset(directory: str | Path, tasks: list[TaskDef], num_classes: int,
                  class_names: list[str] | None = None, scenario: ScenarioSpec | None = None) -> DatasetIndex:
    """Write samples and ``index.json``; with ``scenario`` given, also the split description ``scenario.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    records: list[SampleRecord] = []
    task_records: list[TaskRecord] = []
    for task in tasks:
        for split, samples in (("train", task.train_samples), ("val", task.val_samples)):
            for sample in samples:
                _write_sample(directory, sample)
                records.append(SampleRecord(
                    id=sample.id, task_id=sample.task_id, split=split,
                    channels=sample.image.channels, height=sample.image.height,
                    width=sample.image.width, has_true_labels=sample.true_labels is not None,
                ))
        task_records.append(TaskRecord(
            task_id=task.task_id,
            labeled_classes=sorted(task.labeled_classes),
            exclusive_classes=sorted(task.exclusive_classes),
            train_ids=[s.id for s in task.train_samples],
            val_ids=[s.id for s in task.val_samples],
        ))
    index = DatasetIndex(
        scenario=tasks[0].scenario if tasks else ScenarioKind.CLASS_INCREMENTAL,
        num_classes=num_classes,
        class_names=class_names or [f"class_{c}" for c in range(num_classes)],
        tasks=task_records,
        samples=records,
    )
    (directory / INDEX_FILE).write_text(index.model_dump_json(indent=2))
    if scenario is not None:
        (directory / SCENARIO_FILE).write_text(scenario.model_dump_json(indent=2))
    logger.info("wrote %d samples in %d tasks to %s", len(records), len(tasks), directory)
    return index


def read_dataset(directory: str | Path) -> tuple[DatasetIndex, list[TaskDef]]:
    directory = Path(directory)
    index = DatasetIndex.model_validate_json((directory / INDEX_FILE).read_text())
    by_id = {record.id: record for record in index.samples}
    tasks = []
    for task in index.tasks:
        tasks.append(TaskDef(
            task_id=task.task_id,
            train_samples=[_read_sample(directory, by_id[i]) for i in task.train_ids],
            val_samples=[_read_sample(directory, by_id[i]) for i in task.val_ids],
            labeled_classes=frozenset(task.labeled_classes),
            scenario=index.scenario,
            exclusive_classes=frozenset(task.exclusive_classes),
        ))
    return index, tasks


def dataset_hash(directory: str | Path) -> str:
    """SHA-256 over every file of a dataset directory, in name order."""
    digest = hashlib.sha256()
    for path in sorted(Path(directory).iterdir()):
        if path.is_file():
            digest.update(path.name.encode("utf-8"))
            digest.update(path.read_bytes())
    return digest.hexdigest()


def tasks_hash(tasks: list[TaskDef]) -> str:
    """Content hash of in-memory tasks, equal for equal datasets."""
    digest = hashlib.sha256()
    for task in tasks:
        digest.update(repr((task.task_id, sorted(task.labeled_classes))).encode("utf-8"))
        for sample in task.train_samples + task.val_samples:
            digest.update(str(sample.id).encode("utf-8"))
            digest.update(sample.image.data.tobytes())
            digest.update(sample.labels.data.tobytes())
    return digest.hexdigest()
