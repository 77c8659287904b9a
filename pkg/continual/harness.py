"""Run drivers: continual task sequences, the offline upper bound and policy grids.

A run directory holds::

    metrics.json                 RunMetrics, no timestamps
    config.env / config.json     the input config as given, and as resolved
    confusion_{k}.csv            confusion over all seen validation sets after task k
    cka.csv                      drift of each later snapshot from the task-0 snapshot
    buffer_manifest_{k}.json     buffer contents after task k (buffer_manifest.json: final)
    checkpoints/task_{k}/        model.bin + model.json
"""
from __future__ import annotations

import csv
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from continual.buffer import MANIFEST_FILE, ReplayBuffer, quota, read_manifest, settle_new_task, write_manifest
from continual.datasets import dataset_hash, read_dataset, tasks_hash, write_dataset
from continual.errors import ConfigError, ContinualError, InvariantViolation, TrainingDivergedError
from continual.metrics import (ConfusionMatrix, cka_drift, evaluate, miou, read_cka_csv, read_confusion_csv,
                               recency_bias, write_cka_csv, write_confusion_csv)
from continual.model import ToySegModel, grow_head, init_model, load_checkpoint, save_checkpoint
from continual.policies import eviction_for, select
from continual.schemas import (CkaRecord, ExperimentGrid, GridCell, PolicyId, RunConfig, RunMetrics, StepMetrics,
                               build)
from continual.synthdata import class_names, generate_scenario
from continual.training import train_task
from continual.types import Rng, Sample, ScenarioKind, TaskDef

logger = logging.getLogger(__name__)

METRICS_FILE = "metrics.json"
CONFIG_ECHO = "config.env"
RESOLVED_CONFIG = "config.json"
CKA_FILE = "cka.csv"
SUMMARY_FILE = "summary.csv"


@dataclass
class RunArtifacts:
    run_dir: Path
    metrics: RunMetrics
    checkpoints: list[Path] = field(default_factory=list)
    manifests: list[Path] = field(default_factory=list)
    confusions: list[Path] = field(default_factory=list)

    @property
    def seed(self) -> int:
        return self.metrics.seed

    @property
    def cka(self) -> list[CkaRecord]:
        return self.metrics.cka

    @property
    def ok(self) -> bool:
        return self.metrics.error is None and not self.metrics.invariant_violations

    def files(self) -> list[Path]:
        extra = [self.run_dir / name for name in (METRICS_FILE, CONFIG_ECHO, RESOLVED_CONFIG, CKA_FILE)]
        return [p for p in extra if p.exists()] + self.confusions + self.manifests + self.checkpoints

    def verify(self) -> list[str]:
        """Problems found re-reading every artifact; empty when all parse."""
        problems = []
        for path in self.files():
            try:
                if path.name == METRICS_FILE:
                    RunMetrics.model_validate_json(path.read_text())
                elif path.name == CKA_FILE:
                    read_cka_csv(path)
                elif path.name.startswith("confusion_"):
                    read_confusion_csv(path)
                elif path.name.startswith("buffer_manifest"):
                    read_manifest(path)
                elif path.is_dir():
                    load_checkpoint(path)
            except (OSError, ValueError, ContinualError) as exc:
                problems.append(f"{path}: {exc}")
        return problems

    @classmethod
    def load(cls, run_dir: str | Path) -> RunArtifacts:
        run_dir = Path(run_dir)
        metrics = RunMetrics.model_validate_json((run_dir / METRICS_FILE).read_text())
        steps = range(len(metrics.steps))
        return cls(
            run_dir, metrics,
            checkpoints=[p for p in (run_dir / "checkpoints" / f"task_{k}" for k in steps) if p.exists()],
            manifests=[p for p in (run_dir / f"buffer_manifest_{k}.json" for k in steps) if p.exists()],
            confusions=[p for p in (run_dir / f"confusion_{k}.csv" for k in steps) if p.exists()],
        )

    def confusion(self, step: int) -> ConfusionMatrix:
        return read_confusion_csv(self.run_dir / f"confusion_{step}.csv")


def render_config(config: RunConfig) -> str:
    """KEY=value text that ``RunConfig.from_file`` reads back to an equal config."""
    lines = []
    for key, value in config.model_dump(mode="json").items():
        if value is None:
            continue
        if isinstance(value, list):
            value = ",".join(str(v) for v in value)
        lines.append(f"{key.upper()}={value}")
    return "\n".join(lines) + "\n"


def _seen_classes(tasks: Sequence[TaskDef], k: int, num_classes: int) -> list[int]:
    if tasks[0].scenario == ScenarioKind.CLASS_INCREMENTAL:
        return sorted(set().union(*(t.labeled_classes for t in tasks[: k + 1])))
    return list(range(num_classes))


def _check_scenario(config: RunConfig, tasks: Sequence[TaskDef]) -> ScenarioKind:
    if not tasks:
        raise ConfigError("scenario has no tasks")
    kind = tasks[0].scenario
    if any(t.scenario != kind for t in tasks):
        raise ConfigError("tasks mix scenario kinds")
    if any(not t.train_samples for t in tasks):
        raise ConfigError("every task needs training samples")
    used = set().union(*(t.labeled_classes for t in tasks))
    if max(used) >= config.num_classes:
        raise ConfigError(f"scenario uses class {max(used)} but num_classes is {config.num_classes}")
    if kind == ScenarioKind.CLASS_INCREMENTAL:
        flat = [c for t in tasks for c in sorted(t.labeled_classes)]
        if flat != list(range(len(flat))):
            raise ConfigError("class-incremental tasks must introduce classes 0..C-1 in order")
    return kind


def _optional_mean(values: Sequence[float | None]) -> float | None:
    defined = [v for v in values if v is not None]
    return float(np.mean(defined)) if defined else None


def evaluate_step(model: ToySegModel, tasks: Sequence[TaskDef], k: int, num_classes: int,
                  kind: ScenarioKind) -> tuple[StepMetrics, ConfusionMatrix]:
    """Metrics after task ``k`` over the validation sets of tasks 0..k."""
    seen = _seen_classes(tasks, k, num_classes)
    per_task = [evaluate(model, tasks[j].val_samples, num_classes, seen) for j in range(k + 1)]
    cm = per_task[0]
    for extra in per_task[1:]:
        cm = cm + extra
    overall = miou(cm, seen)
    task_miou = [miou(m, seen).value for m in per_task]
    exclusive = sorted(set().union(*(t.exclusive_classes for t in tasks[: k + 1])))
    old_exclusive = sorted(set().union(*(t.exclusive_classes for t in tasks[:k])))
    newest = sorted(tasks[k].labeled_classes)
    incremental = kind == ScenarioKind.CLASS_INCREMENTAL and k > 0
    old = sorted(set(seen) - set(newest))
    metrics = StepMetrics(
        step=k,
        task_id=tasks[k].task_id,
        seen_classes=seen,
        subset_miou={str(tasks[j].task_id): miou(cm, tasks[j].labeled_classes).value for j in range(k + 1)},
        all_miou=overall.value,
        per_class_iou={str(c): v for c, v in overall.per_class.items()},
        excluded_classes=overall.excluded,
        task_miou=task_miou,
        task_miou_average=_optional_mean(task_miou),
        exclusive_miou=miou(cm, exclusive).value if exclusive else None,
        recency_bias=recency_bias(cm, old, newest) if incremental else None,
        exclusive_recency_bias=recency_bias(cm, old_exclusive, newest) if incremental and old_exclusive else None,
    )
    return metrics, cm


def _check_selection(entries, task: TaskDef) -> None:
    allowed = {s.id for s in task.train_samples}
    for entry in entries:
        if entry.sample.id not in allowed or entry.inserted_at != task.task_id:
            raise InvariantViolation(f"selection for task {task.task_id} returned sample {entry.sample.id} "
                                     "from outside the task's training data")


def _check_provenance(buffer: ReplayBuffer, k: int) -> None:
    late = [e.sample.id for e in buffer.entries if e.inserted_at > k]
    if late:
        raise InvariantViolation(f"buffer holds samples {late} from tasks after {k}")
    if sum(buffer.quotas) > buffer.capacity:
        raise InvariantViolation(f"quotas {buffer.quotas} exceed capacity {buffer.capacity}")


def _capacity_observer(capacity: int) -> Callable[[int], None]:
    def observe(size: int) -> None:
        if size > capacity:
            raise InvariantViolation(f"buffer grew to {size} entries, capacity {capacity}")
    return observe


def _prepare(config: RunConfig, out_dir: str | Path, config_text: str | None) -> Path:
    run_dir = Path(out_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / CONFIG_ECHO).write_text(config_text if config_text is not None else render_config(config))
    (run_dir / RESOLVED_CONFIG).write_text(config.model_dump_json(indent=2))
    return run_dir


def _finish(artifacts: RunArtifacts) -> RunArtifacts:
    run_dir = artifacts.run_dir
    write_cka_csv(artifacts.metrics.cka, run_dir / CKA_FILE)
    (run_dir / METRICS_FILE).write_text(artifacts.metrics.model_dump_json(indent=2))
    problems = artifacts.verify()
    if problems:
        artifacts.metrics.invariant_violations.extend(problems)
        (run_dir / METRICS_FILE).write_text(artifacts.metrics.model_dump_json(indent=2))
    return artifacts


def _new_metrics(config: RunConfig, tasks: Sequence[TaskDef], mode: str, data_hash: str | None,
                 distill: bool) -> RunMetrics:
    policy = config.selection_policy
    return RunMetrics(
        name=config.name or f"{policy.id.value}_M{config.buffer_size}_s{config.seed}",
        mode=mode,
        scenario=tasks[0].scenario,
        dataset_hash=data_hash or tasks_hash(list(tasks)),
        epochs_per_task=config.epochs,
        policy=policy.id.value,
        policy_params=policy.params(),
        buffer_size=config.buffer_size,
        seed=config.seed,
        distillation=distill,
    )


def run_continual(config: RunConfig, tasks: Sequence[TaskDef], out_dir: str | Path,
                  data_hash: str | None = None, config_text: str | None = None) -> RunArtifacts:
    """Train the task sequence in order with replay, evaluating after every task.

    Per task: train on its data (plus the buffer), evaluate on every seen
    validation set, run the selection policy on this task's training data only,
    then settle the buffer under the new quotas. Training divergence and broken
    invariants end the run early; the artifacts written so far are kept and
    the failure is recorded in ``metrics.json``.
    """
    kind = _check_scenario(config, tasks)
    if 0 < config.buffer_size < len(tasks):
        raise ConfigError(f"buffer of {config.buffer_size} cannot hold a sample from each of {len(tasks)} tasks")
    run_dir = _prepare(config, out_dir, config_text)
    policy = config.selection_policy
    distill = config.uses_distillation(kind)
    rng = Rng(config.seed)
    artifacts = RunArtifacts(run_dir, _new_metrics(config, tasks, "continual", data_hash, distill))
    capacity = config.buffer_size if policy.id != PolicyId.NONE else 0
    buffer = ReplayBuffer(capacity, config.num_classes, policy.id.value,
                          observer=_capacity_observer(capacity))
    first_classes = len(tasks[0].labeled_classes) if kind == ScenarioKind.CLASS_INCREMENTAL else config.num_classes
    model = init_model(first_classes, rng.substream("init"), config.patch_size, config.hidden_widths)
    first_snapshot: ToySegModel | None = None
    logger.info("run %s: %d tasks, policy %s, M=%d, distillation %s",
                artifacts.metrics.name, len(tasks), policy.id.value, capacity, "on" if distill else "off")
    try:
        for k, task in enumerate(tasks):
            seen = _seen_classes(tasks, k, config.num_classes)
            old_classes = _seen_classes(tasks, k - 1, config.num_classes) if k > 0 else []
            teacher = model if distill and k > 0 else None
            if kind == ScenarioKind.CLASS_INCREMENTAL:
                model = grow_head(model, len(seen))
            replay = buffer if len(buffer) else None
            model, trace = train_task(model, task.train_samples, config, rng.substream("train", k),
                                      teacher, old_classes, replay)
            artifacts.checkpoints.append(save_checkpoint(model, run_dir / "checkpoints" / f"task_{k}", k))

            step, cm = evaluate_step(model, tasks, k, config.num_classes, kind)
            step.loss_trace = trace.epoch_means
            confusion_path = run_dir / f"confusion_{k}.csv"
            write_confusion_csv(cm, confusion_path)
            artifacts.confusions.append(confusion_path)
            if first_snapshot is None:
                first_snapshot = model
            else:
                curve = cka_drift(first_snapshot, model, tasks[0].val_samples, rng.substream("cka"),
                                  pixels=config.cka_pixels)
                artifacts.metrics.cka.extend(curve.records(k))

            # selection sees this task's training data, the buffer and the current model only
            held = [sum(1 for e in buffer.entries if e.inserted_at == t) for t in range(k)]
            slots = quota(capacity, k + 1, held + [len(task.train_samples)])[k] if capacity else 0
            result = select(policy, task.train_samples, model, slots, rng.substream("select", k), buffer,
                            task_classes=sorted(task.labeled_classes), buffer_classes=seen)
            _check_selection(result.entries, task)
            buffer = settle_new_task(buffer, result.entries, eviction_for(policy, seen),
                                     rng.substream("settle", k), k)
            buffer.warnings.extend(result.warnings)
            _check_provenance(buffer, k)
            manifest_path = run_dir / f"buffer_manifest_{k}.json"
            write_manifest(buffer, manifest_path)
            artifacts.manifests.append(manifest_path)
            step.buffer_entries = len(buffer)
            artifacts.metrics.steps.append(step)
            logger.info("task %d: all-class mIoU %s, buffer %d/%d", k, step.all_miou, len(buffer), capacity)
        write_manifest(buffer, run_dir / MANIFEST_FILE)
    except TrainingDivergedError as exc:
        logger.error("run %s diverged: %s", artifacts.metrics.name, exc)
        artifacts.metrics.error = str(exc)
    except InvariantViolation as exc:
        logger.error("run %s broke an invariant: %s", artifacts.metrics.name, exc)
        artifacts.metrics.invariant_violations.append(str(exc))
    return _finish(artifacts)


def run_offline(config: RunConfig, tasks: Sequence[TaskDef], out_dir: str | Path,
                data_hash: str | None = None, config_text: str | None = None) -> RunArtifacts:
    """Joint training on the union of every task with full labels: the upper bound."""
    kind = _check_scenario(config, tasks)
    run_dir = _prepare(config, out_dir, config_text)
    rng = Rng(config.seed)
    artifacts = RunArtifacts(run_dir, _new_metrics(config, tasks, "offline", data_hash, False))
    seen = _seen_classes(tasks, len(tasks) - 1, config.num_classes)
    joint = [Sample(s.id, s.image, s.full_labels.restricted_to(seen), s.task_id)
             for t in tasks for s in t.train_samples]
    num_classes = len(seen)
    model = init_model(num_classes, rng.substream("init"), config.patch_size, config.hidden_widths)
    try:
        model, trace = train_task(model, joint, config, rng.substream("train", 0))
        last = len(tasks) - 1
        artifacts.checkpoints.append(save_checkpoint(model, run_dir / "checkpoints" / f"task_{last}", last))
        step, cm = evaluate_step(model, tasks, last, config.num_classes, kind)
        step.loss_trace = trace.epoch_means
        confusion_path = run_dir / f"confusion_{last}.csv"
        write_confusion_csv(cm, confusion_path)
        artifacts.confusions.append(confusion_path)
        artifacts.metrics.steps.append(step)
    except TrainingDivergedError as exc:
        logger.error("offline run diverged: %s", exc)
        artifacts.metrics.error = str(exc)
    return _finish(artifacts)


_CELL_PARAMS = {"th": "th", "cmp": "cmp", "d": "rss_dim", "rss_dim": "rss_dim", "direction": "direction"}


def cell_config(base: RunConfig, cell: GridCell) -> RunConfig:
    update: dict[str, Any] = {"policy": cell.policy, "buffer_size": cell.buffer_size, "seed": cell.seed,
                              "name": cell.label}
    for key, value in cell.params.items():
        if key not in _CELL_PARAMS:
            raise ConfigError(f"unknown policy parameter {key!r} in grid cell {cell.label}")
        update[_CELL_PARAMS[key]] = value
    return build(RunConfig, {**base.model_dump(), **update})


@dataclass
class CellOutcome:
    cell: GridCell
    run_dir: Path
    metrics: RunMetrics | None = None
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.error is None and self.metrics is not None and self.metrics.error is None \
            and not self.metrics.invariant_violations


def _run_cell(config_json: str, data_dir: str, expected_hash: str, run_dir: str) -> str:
    """Worker entry point; arguments and result are JSON strings so they pickle cheaply."""
    config = RunConfig.model_validate_json(config_json)
    actual = dataset_hash(data_dir)
    if actual != expected_hash:
        raise InvariantViolation(f"dataset {data_dir} changed: hash {actual[:12]} != {expected_hash[:12]}")
    _, tasks = read_dataset(data_dir)
    artifacts = run_continual(config, tasks, run_dir, data_hash=actual)
    return artifacts.metrics.model_dump_json()


def _cell_job(grid: ExperimentGrid, cell: GridCell, data_dir: Path, expected: str,
              run_dir: Path) -> tuple[str, str, str, str]:
    config = cell_config(grid.base, cell).model_copy(update={"num_classes": grid.scenario.num_classes})
    return config.model_dump_json(), str(data_dir), expected, str(run_dir)


def _submit(pool: ProcessPoolExecutor, grid: ExperimentGrid, cell: GridCell, data_dir: Path, expected: str,
            run_dir: Path) -> Callable[[], str]:
    """Submit one cell; a cell whose config does not validate fails when its result is read."""
    try:
        job = _cell_job(grid, cell, data_dir, expected, run_dir)
    except ConfigError as exc:
        error = exc

        def rejected() -> str:
            raise error
        return rejected
    return pool.submit(_run_cell, *job).result


def _cell_outcome(cell: GridCell, run_dir: Path, call: Callable[[], str]) -> CellOutcome:
    try:
        return CellOutcome(cell, run_dir, RunMetrics.model_validate_json(call()))
    except ContinualError as exc:
        logger.error("grid cell %s failed: %s", cell.label, exc)
        return CellOutcome(cell, run_dir, error=str(exc))
    except Exception as exc:
        logger.exception("grid cell %s crashed", cell.label)
        return CellOutcome(cell, run_dir, error=f"{type(exc).__name__}: {exc}")


def run_grid(grid: ExperimentGrid, out_dir: str | Path,
             recorder: Callable[[CellOutcome], None] | None = None) -> Path:
    """Run every cell of ``grid`` on one shared dataset and write ``summary.csv``.

    Cells run in a process pool when ``grid.workers`` > 1. A failing cell is
    reported in its summary row and does not stop the others.
    """
    out_dir = Path(out_dir)
    data_dir = out_dir / "data"
    tasks = generate_scenario(grid.scenario, Rng(grid.data_seed))
    write_dataset(data_dir, tasks, grid.scenario.num_classes, class_names(grid.scenario), grid.scenario)
    expected = dataset_hash(data_dir)
    runs = [(cell, out_dir / "runs" / cell.label) for cell in grid.cells]
    logger.info("grid %s: %d cells, %d workers, dataset %s", grid.name, len(runs), grid.workers, expected[:12])
    if grid.workers == 1:
        outcomes = [_cell_outcome(cell, run_dir, lambda cell=cell, run_dir=run_dir:
                                  _run_cell(*_cell_job(grid, cell, data_dir, expected, run_dir)))
                    for cell, run_dir in runs]
    else:
        with ProcessPoolExecutor(max_workers=grid.workers) as pool:
            calls = [(cell, run_dir, _submit(pool, grid, cell, data_dir, expected, run_dir)) for cell, run_dir in runs]
            outcomes = [_cell_outcome(cell, run_dir, call) for cell, run_dir, call in calls]
    if recorder is not None:
        for outcome in outcomes:
            recorder(outcome)
    summary = out_dir / SUMMARY_FILE
    write_summary(outcomes, summary, len(tasks))
    return summary


SUMMARY_COLUMNS = ("policy", "params", "buffer_size", "seed", "step", "all_miou", "task_miou_average",
                   "exclusive_miou", "recency_bias", "exclusive_recency_bias")
_STEP_FIELDS = SUMMARY_COLUMNS[5:]


def _fmt(value: float | None) -> str:
    return "" if value is None else f"{value:.6f}"


def _step_values(step: StepMetrics, num_tasks: int) -> list[float | None]:
    values = [getattr(step, name) for name in _STEP_FIELDS]
    return values + [step.subset_miou.get(str(t)) for t in range(num_tasks)]


def summary_rows(outcomes: Sequence[CellOutcome], num_tasks: int) -> list[list[str]]:
    """One row per cell and step, plus mean/best/worst rows for groups of several seeds.

    Best and worst are the seeds with the highest and lowest final all-class mIoU.
    """
    rows: list[list[str]] = []
    groups: dict[tuple[str, str, int], list[CellOutcome]] = {}
    ordered = sorted(outcomes, key=lambda o: (o.cell.buffer_size, o.cell.policy.value,
                                              json.dumps(o.cell.params, sort_keys=True), o.cell.seed))
    for outcome in ordered:
        params = json.dumps(outcome.cell.params, sort_keys=True)
        head = [outcome.cell.policy.value, params, str(outcome.cell.buffer_size)]
        groups.setdefault((head[0], head[1], outcome.cell.buffer_size), []).append(outcome)
        if outcome.metrics is None or not outcome.metrics.steps:
            error = outcome.error or (outcome.metrics.error if outcome.metrics else "no steps")
            rows.append(head + [str(outcome.cell.seed), "", ""] + [""] * (len(_STEP_FIELDS) - 1 + num_tasks)
                        + [error or ""])
            continue
        for step in outcome.metrics.steps:
            error = outcome.metrics.error or ("; ".join(outcome.metrics.invariant_violations) or "")
            rows.append(head + [str(outcome.cell.seed), str(step.step)]
                        + [_fmt(v) for v in _step_values(step, num_tasks)] + [error])
    for (policy, params, size), members in groups.items():
        finished = [m for m in members if m.metrics is not None and m.metrics.steps]
        if len(finished) < 2:
            continue
        final = [m.metrics.steps[-1].all_miou if m.metrics.steps[-1].all_miou is not None else -np.inf
                 for m in finished]
        head = [policy, params, str(size)]
        steps = min(len(m.metrics.steps) for m in finished)
        for k in range(steps):
            columns = list(zip(*(_step_values(m.metrics.steps[k], num_tasks) for m in finished)))
            rows.append(head + ["mean", str(finished[0].metrics.steps[k].step)]
                        + [_fmt(_optional_mean(col)) for col in columns] + [""])
        for label, pick in (("best", int(np.argmax(final))), ("worst", int(np.argmin(final)))):
            chosen = finished[pick]
            for step in chosen.metrics.steps:
                rows.append(head + [f"{label}(s{chosen.cell.seed})", str(step.step)]
                            + [_fmt(v) for v in _step_values(step, num_tasks)] + [""])
    return rows


def write_summary(outcomes: Sequence[CellOutcome], path: str | Path, num_tasks: int) -> None:
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(list(SUMMARY_COLUMNS) + [f"subset_{t}" for t in range(num_tasks)] + ["error"])
        writer.writerows(summary_rows(outcomes, num_tasks))
