"""Fixed-capacity replay memory split into per-task quotas."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Protocol, Sequence

import numpy as np

from continual.errors import ConfigError, InvariantViolation
from continual.schemas import BufferManifest, ManifestEntry
from continual.types import ClassHistogram, Rng, Sample, class_histogram

logger = logging.getLogger(__name__)

MANIFEST_FILE = "buffer_manifest.json"


@dataclass(frozen=True)
class BufferEntry:
    sample: Sample
    score: float | None
    inserted_at: int
    histogram: ClassHistogram | None = None
    embedding: np.ndarray | None = None
    # ascending tie-break under the stored score
    secondary: float | None = None

    def __post_init__(self):
        if self.sample.task_id != self.inserted_at:
            raise InvariantViolation(
                f"sample {self.sample.id} of task {self.sample.task_id} inserted at task {self.inserted_at}")
        if self.score is not None and not np.isfinite(self.score):
            raise InvariantViolation(f"sample {self.sample.id} carries a non-finite score")


class EvictionRule(Protocol):
    """Shrinks one task's holdings to ``keep`` entries."""

    name: str

    def shrink(self, entries: Sequence[BufferEntry], keep: int, rng: Rng,
               context: ClassHistogram) -> list[BufferEntry]: ...


@dataclass(frozen=True)
class RandomEviction:
    name: str = "random"

    def shrink(self, entries, keep, rng, context):
        chosen = np.sort(rng.choice(len(entries), size=keep, replace=False))
        return [entries[i] for i in chosen]


@dataclass(frozen=True)
class ScoreEviction:
    """Keeps the lowest (``keep_lowest``) or highest stored scores.

    Ties go to the lower ``secondary`` key, then to the lower sample id.
    """

    keep_lowest: bool = True
    name: str = "score"

    def shrink(self, entries, keep, rng, context):
        scores = np.array([e.score if e.score is not None else np.inf for e in entries])
        secondary = np.array([e.secondary if e.secondary is not None else np.inf for e in entries])
        ids = np.array([e.sample.id for e in entries])
        order = np.lexsort((ids, secondary, scores if self.keep_lowest else -scores))
        return [entries[i] for i in sorted(order[:keep])]


@dataclass
class ReplayBuffer:
    capacity: int
    num_classes: int
    policy: str = "random"
    entries: list[BufferEntry] = field(default_factory=list)
    quotas: list[int] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)
    observer: Callable[[int], None] | None = None

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def tasks_seen(self) -> int:
        return len(self.quotas)

    def counts(self) -> list[int]:
        return [sum(1 for e in self.entries if e.inserted_at == t) for t in range(self.tasks_seen)]

    def samples(self) -> list[Sample]:
        return [e.sample for e in self.entries]

    def histogram(self, exclude_task: int | None = None) -> ClassHistogram:
        total = ClassHistogram.zeros(self.num_classes)
        for entry in self.entries:
            if entry.inserted_at != exclude_task:
                total = total + entry_histogram(entry, self.num_classes)
        return total

    def _check_capacity(self) -> None:
        if self.observer is not None:
            self.observer(len(self.entries))
        if len(self.entries) > self.capacity:
            raise InvariantViolation(f"buffer holds {len(self.entries)} entries, capacity {self.capacity}")


def entry_histogram(entry: BufferEntry, num_classes: int) -> ClassHistogram:
    if entry.histogram is not None:
        return entry.histogram
    return class_histogram(entry.sample.labels, num_classes)


def quota(capacity: int, tasks: int, available: Sequence[int] | None = None) -> list[int]:
    """Per-task slot counts: ⌊M/K⌋ each, remainder to the earliest tasks.

    With ``available`` given, no task is granted more than it can supply and the
    freed slots go, earliest task first, to tasks that still have samples.
    """
    if tasks < 1:
        raise ConfigError("quota needs at least one task")
    base = [capacity // tasks + (1 if i < capacity % tasks else 0) for i in range(tasks)]
    if available is None:
        return base
    counts = [min(b, a) for b, a in zip(base, available)]
    spare = capacity - sum(counts)
    while spare > 0:
        progressed = False
        for i in range(tasks):
            if spare and counts[i] < available[i]:
                counts[i] += 1
                spare -= 1
                progressed = True
        if not progressed:
            break
    return counts


def shrink_earlier_tasks(buffer: ReplayBuffer, task_id: int, incoming: int, eviction: EvictionRule,
                         rng: Rng) -> tuple[ReplayBuffer, list[int]]:
    """Copy of ``buffer`` with tasks before ``task_id`` cut to the quotas a task of ``incoming`` entries implies."""
    settled = ReplayBuffer(buffer.capacity, buffer.num_classes, buffer.policy, list(buffer.entries),
                           list(buffer.quotas), list(buffer.warnings), buffer.observer)
    held = [sum(1 for e in settled.entries if e.inserted_at == t) for t in range(task_id)]
    quotas = quota(buffer.capacity, task_id + 1, held + [incoming])
    for t in range(task_id):
        mine = [e for e in settled.entries if e.inserted_at == t]
        if len(mine) <= quotas[t]:
            continue
        context = settled.histogram(exclude_task=t)
        kept = eviction.shrink(mine, quotas[t], rng.substream("evict", t), context)
        kept_ids = {e.sample.id for e in kept}
        settled.entries = [e for e in settled.entries if e.inserted_at != t or e.sample.id in kept_ids]
        settled._check_capacity()
        logger.debug("task %d shrunk from %d to %d entries (%s)", t, len(mine), len(kept), eviction.name)
    return settled, quotas


def settle_new_task(buffer: ReplayBuffer, new_entries: Sequence[BufferEntry], eviction: EvictionRule,
                    rng: Rng, task_id: int | None = None) -> ReplayBuffer:
    """Shrink earlier tasks to their new quotas, then insert the new task's entries."""
    task_id = buffer.tasks_seen if task_id is None else task_id
    if any(e.inserted_at != task_id for e in new_entries):
        raise InvariantViolation(f"settle for task {task_id} received entries of another task")
    settled, quotas = shrink_earlier_tasks(buffer, task_id, len(new_entries), eviction, rng)
    incoming = list(new_entries)
    if len(incoming) > quotas[task_id]:
        message = (f"task {task_id}: policy offered {len(incoming)} entries for a quota of "
                   f"{quotas[task_id]}; extra entries dropped")
        logger.warning(message)
        settled.warnings.append(message)
        incoming = incoming[: quotas[task_id]]
    for entry in incoming:
        settled.entries.append(entry)
        settled._check_capacity()
    settled.quotas = quotas
    return settled


def retrieve_uniform(buffer: ReplayBuffer, n: int, rng: Rng) -> list[Sample]:
    """``n`` draws with replacement, uniform over the entries."""
    if n <= 0 or not buffer.entries:
        return []
    picks = rng.integers(0, len(buffer.entries), size=n)
    return [buffer.entries[i].sample for i in picks]


def manifest(buffer: ReplayBuffer) -> BufferManifest:
    return BufferManifest(
        capacity=buffer.capacity,
        policy=buffer.policy,
        quotas=list(buffer.quotas),
        entries=[ManifestEntry(sample_id=e.sample.id, task_id=e.inserted_at, score=e.score)
                 for e in buffer.entries],
        histogram=[int(c) for c in buffer.histogram().counts],
        warnings=list(buffer.warnings),
    )


def write_manifest(buffer: ReplayBuffer, path: str | Path) -> BufferManifest:
    record = manifest(buffer)
    Path(path).write_text(record.model_dump_json(indent=2))
    return record


def read_manifest(path: str | Path) -> BufferManifest:
    return BufferManifest.model_validate_json(Path(path).read_text())
