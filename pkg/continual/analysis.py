"""Side-by-side comparison of two finished runs on the same scenario."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

from continual.errors import ScenarioMismatchError
from continual.harness import RunArtifacts

logger = logging.getLogger(__name__)


@dataclass
class ComparisonReport:
    steps: list[int]
    recency_delta: dict[int, float | None] = field(default_factory=dict)
    exclusive_recency_delta: dict[int, float | None] = field(default_factory=dict)
    miou_delta: dict[int, float | None] = field(default_factory=dict)
    # largest absolute cell difference between the two confusion matrices, per step
    confusion_delta: dict[int, int] = field(default_factory=dict)
    files: list[Path] = field(default_factory=list)


def _delta(a: float | None, b: float | None) -> float | None:
    return None if a is None or b is None else b - a


def analyze(run_a: str | Path | RunArtifacts, run_b: str | Path | RunArtifacts, out_dir: str | Path) -> ComparisonReport:
    """Write confusion, recency-bias and CKA comparison tables for runs ``a`` and ``b``.

    Deltas are ``b - a``. Runs must share scenario kind and dataset.
    """
    a = run_a if isinstance(run_a, RunArtifacts) else RunArtifacts.load(run_a)
    b = run_b if isinstance(run_b, RunArtifacts) else RunArtifacts.load(run_b)
    if (a.metrics.scenario, a.metrics.dataset_hash) != (b.metrics.scenario, b.metrics.dataset_hash):
        raise ScenarioMismatchError(
            f"{a.run_dir} ({a.metrics.scenario.value}, {a.metrics.dataset_hash[:12]}) and "
            f"{b.run_dir} ({b.metrics.scenario.value}, {b.metrics.dataset_hash[:12]}) ran on different scenarios")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    steps_a = {s.step: s for s in a.metrics.steps}
    steps_b = {s.step: s for s in b.metrics.steps}
    report = ComparisonReport(sorted(set(steps_a) & set(steps_b)))

    recency_path = out_dir / "recency.csv"
    with open(recency_path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(("step", "all_miou_a", "all_miou_b", "all_miou_delta", "recency_a", "recency_b",
                         "recency_delta", "exclusive_recency_a", "exclusive_recency_b", "exclusive_recency_delta"))
        for k in report.steps:
            sa, sb = steps_a[k], steps_b[k]
            report.miou_delta[k] = _delta(sa.all_miou, sb.all_miou)
            report.recency_delta[k] = _delta(sa.recency_bias, sb.recency_bias)
            report.exclusive_recency_delta[k] = _delta(sa.exclusive_recency_bias, sb.exclusive_recency_bias)
            writer.writerow([k] + ["" if v is None else v for v in (
                sa.all_miou, sb.all_miou, report.miou_delta[k],
                sa.recency_bias, sb.recency_bias, report.recency_delta[k],
                sa.exclusive_recency_bias, sb.exclusive_recency_bias, report.exclusive_recency_delta[k])])
    report.files.append(recency_path)

    for k in report.steps:
        cm_a, cm_b = a.confusion(k), b.confusion(k)
        path = out_dir / f"confusion_{k}_side_by_side.csv"
        size = max(cm_a.num_classes, cm_b.num_classes)
        with open(path, "w", newline="") as handle:
            writer = csv.writer(handle)
            writer.writerow(("truth", "prediction", "count_a", "count_b", "delta"))
            biggest = 0
            for t in range(size):
                for p in range(size):
                    ca = int(cm_a.counts[t, p]) if t < cm_a.num_classes and p < cm_a.num_classes else 0
                    cb = int(cm_b.counts[t, p]) if t < cm_b.num_classes and p < cm_b.num_classes else 0
                    biggest = max(biggest, abs(cb - ca))
                    writer.writerow((t, p, ca, cb, cb - ca))
        report.confusion_delta[k] = biggest
        report.files.append(path)

    cka_path = out_dir / "cka_overlay.csv"
    with open(cka_path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(("run", "step", "layer", "value"))
        for label, run in (("a", a), ("b", b)):
            for record in run.cka:
                writer.writerow((f"{label}:{run.metrics.name}", record.step, record.layer, repr(record.value)))
    report.files.append(cka_path)
    logger.info("compared %s and %s over %d steps", a.metrics.name, b.metrics.name, len(report.steps))
    return report
