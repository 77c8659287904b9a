"""Sample-selection policies: what a finished task leaves in the replay buffer.

Every policy returns the chosen entries plus the eviction rule the buffer applies
when that task's quota later shrinks. Ties are always broken by ascending sample id.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Literal, Sequence

import numpy as np

from continual.buffer import (BufferEntry, EvictionRule, RandomEviction, ReplayBuffer, ScoreEviction,
                              shrink_earlier_tasks)
from continual.clustering import Reducer, kmeans, principal_reducer, reduce_dim
from continual.errors import ConfigError
from continual.model import GradientVector, ToySegModel, embed
from continual.schemas import PolicyId, SelectionPolicy
from continual.scoring import SampleScores, ScoreKind, cosine_distance, score_dataset
from continual.types import ClassHistogram, Rng, Sample, class_histogram

logger = logging.getLogger(__name__)

ScoreSelection = Literal["min", "max", "median", "mean-nearest"]
GSS_SHIFT = 1e-8


@dataclass
class SelectionResult:
    entries: list[BufferEntry]
    eviction: EvictionRule
    warnings: list[str] = field(default_factory=list)

    @property
    def ids(self) -> list[int]:
        return [e.sample.id for e in self.entries]


def _entry(s: SampleScores, score: float | None) -> BufferEntry:
    return BufferEntry(s.sample, None if score is None else float(score), s.sample.task_id,
                       s.histogram, s.embedding)


def _warn(warnings: list[str], message: str) -> None:
    logger.warning(message)
    warnings.append(message)


def _ids(scores: Sequence[SampleScores]) -> np.ndarray:
    return np.array([s.sample_id for s in scores], dtype=np.int64)


def _values(scores: Sequence[SampleScores], key: str) -> np.ndarray:
    values = [getattr(s, key) for s in scores]
    if any(v is None for v in values):
        raise ConfigError(f"score {key!r} missing for some samples")
    return np.array(values, dtype=np.float64)


def score_order(values: np.ndarray, ids: np.ndarray, quota: int, kind: ScoreSelection) -> np.ndarray:
    """Indices of the ``quota`` samples a score criterion picks."""
    n = len(values)
    quota = min(quota, n)
    if kind == "min":
        return np.lexsort((ids, values))[:quota]
    if kind == "max":
        return np.lexsort((ids, -values))[:quota]
    if kind == "median":
        ranked = np.lexsort((ids, values))
        middle = (n - 1) // 2
        start = max(0, min(middle - (quota - 1) // 2, n - quota))
        return ranked[start:start + quota]
    if kind == "mean-nearest":
        return np.lexsort((ids, np.abs(values - values.mean())))[:quota]
    raise ConfigError(f"unknown score selection {kind!r}")


def select_by_score(scores: Sequence[SampleScores], quota: int, kind: ScoreSelection,
                    key: str = "loss") -> SelectionResult:
    if not scores:
        return SelectionResult([], _score_eviction(kind))
    values = _values(scores, key)
    chosen = score_order(values, _ids(scores), quota, kind)
    return SelectionResult([_entry(scores[i], values[i]) for i in chosen], _score_eviction(kind))


@dataclass(frozen=True)
class ReselectByScore:
    """Re-applies a median or mean-nearest criterion to a task's stored scores."""

    kind: ScoreSelection
    name: str = "reselect-score"

    def shrink(self, entries, keep, rng, context):
        values = np.array([e.score for e in entries], dtype=np.float64)
        ids = np.array([e.sample.id for e in entries], dtype=np.int64)
        return [entries[i] for i in sorted(score_order(values, ids, keep, self.kind))]


def _score_eviction(kind: ScoreSelection) -> EvictionRule:
    if kind == "min":
        return ScoreEviction(keep_lowest=True)
    if kind == "max":
        return ScoreEviction(keep_lowest=False)
    return ReselectByScore(kind)


def select_random(scores: Sequence[SampleScores], quota: int, rng: Rng) -> SelectionResult:
    quota = min(quota, len(scores))
    chosen = np.sort(rng.choice(len(scores), size=quota, replace=False)) if quota else []
    return SelectionResult([_entry(scores[i], None) for i in chosen], RandomEviction())


def _histogram(s: SampleScores, num_classes: int | None = None) -> ClassHistogram:
    if s.histogram is not None:
        return s.histogram
    if num_classes is None:
        raise ConfigError(f"sample {s.sample_id} has no class histogram")
    return class_histogram(s.sample.labels, num_classes)


def select_class_balanced_samples(scores: Sequence[SampleScores], quota: int,
                                  rng: Rng | None = None) -> SelectionResult:
    """Samples whose own class distribution is closest to uniform."""
    warnings: list[str] = []
    eviction = ScoreEviction(keep_lowest=True)
    eligible = [i for i, s in enumerate(scores) if s.uniformity_distance is not None]
    if not eligible and scores:
        _warn(warnings, "no sample has labeled pixels; class balancing falls back to random selection")
        if rng is None:
            raise ConfigError("random fallback needs an rng")
        fallback = select_random(scores, quota, rng)
        return SelectionResult(fallback.entries, eviction, warnings)
    values = np.array([scores[i].uniformity_distance for i in eligible])
    ids = _ids([scores[i] for i in eligible])
    chosen = [eligible[i] for i in np.lexsort((ids, values))[:quota]]
    if len(chosen) < min(quota, len(scores)):
        _warn(warnings, "not enough labeled samples for the quota; filling with unlabeled ones")
        rest = [i for i in np.argsort(_ids(scores), kind="stable") if i not in set(chosen)]
        chosen += rest[: min(quota, len(scores)) - len(chosen)]
    return SelectionResult([_entry(scores[i], scores[i].uniformity_distance) for i in chosen], eviction, warnings)


def _balance_distance(totals: np.ndarray) -> np.ndarray:
    sums = totals.sum(axis=1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        p = totals / sums
    distance = np.abs(p - 1.0 / totals.shape[1]).sum(axis=1)
    return np.where(sums[:, 0] > 0, distance, np.inf)


def greedy_balance(histograms: np.ndarray, ids: np.ndarray, quota: int, existing: np.ndarray) -> list[int]:
    """Greedy picks that keep the aggregate distribution closest to uniform."""
    chosen: list[int] = []
    remaining = list(range(len(histograms)))
    total = existing.astype(np.float64).copy()
    while remaining and len(chosen) < quota:
        candidates = np.array(remaining)
        distance = _balance_distance(total[None, :] + histograms[candidates])
        best = candidates[np.lexsort((ids[candidates], distance))[0]]
        chosen.append(int(best))
        remaining.remove(int(best))
        total += histograms[best]
    return chosen


def select_class_balanced_buffer(scores: Sequence[SampleScores], quota: int,
                                 existing: ClassHistogram | None = None,
                                 classes: Sequence[int] | None = None) -> SelectionResult:
    """Greedily move the buffer's class distribution towards uniform over ``classes``."""
    if not scores:
        return SelectionResult([], GreedyBalanceEviction(classes))
    hists = [_histogram(s) for s in scores]
    size = max([h.num_classes for h in hists] + ([existing.num_classes] if existing is not None else []))
    classes = sorted(classes) if classes is not None else list(range(size))
    matrix = np.zeros((len(scores), size))
    for row, h in enumerate(hists):
        matrix[row, : h.num_classes] = h.counts
    base = np.zeros(size)
    if existing is not None:
        base[: existing.num_classes] = existing.counts
    picks = greedy_balance(matrix[:, classes], _ids(scores), quota, base[classes])
    result = SelectionResult([], GreedyBalanceEviction(tuple(classes)))
    running = base[classes].copy()
    for i in picks:
        running += matrix[i, classes]
        score = float(_balance_distance(running[None, :])[0])
        result.entries.append(_entry(scores[i], score if np.isfinite(score) else None))
    return result


def post_quota_histogram(buffer: ReplayBuffer | None, incoming: int,
                         classes: Sequence[int] | None = None) -> ClassHistogram | None:
    """Class counts the buffer keeps once earlier tasks shrink to make room for ``incoming`` entries."""
    if buffer is None:
        return None
    eviction = GreedyBalanceEviction(tuple(sorted(classes)) if classes is not None else None)
    kept, _ = shrink_earlier_tasks(buffer, buffer.tasks_seen, incoming, eviction, Rng(0))
    return kept.histogram()


@dataclass(frozen=True)
class GreedyBalanceEviction:
    """Re-runs the greedy balance over a task's holdings, given the rest of the buffer."""

    classes: tuple[int, ...] | None = None
    name: str = "reselect-balance"

    def shrink(self, entries, keep, rng, context):
        hists = [e.histogram if e.histogram is not None else class_histogram(e.sample.labels, context.num_classes)
                 for e in entries]
        size = max([h.num_classes for h in hists] + [context.num_classes])
        classes = list(self.classes) if self.classes is not None else list(range(size))
        matrix = np.zeros((len(entries), size))
        for row, h in enumerate(hists):
            matrix[row, : h.num_classes] = h.counts
        base = np.zeros(size)
        base[: context.num_classes] = context.counts
        ids = np.array([e.sample.id for e in entries], dtype=np.int64)
        picks = greedy_balance(matrix[:, classes], ids, keep, base[classes])
        return [entries[i] for i in sorted(picks)]


def select_ambivalent(scores: Sequence[SampleScores], quota: int,
                      direction: Literal["min", "max"] = "max") -> SelectionResult:
    """Samples with the most (or fewest) distinct labeled classes."""
    distinct = _values(scores, "distinct_classes") if scores else np.array([])
    uniformity = np.array([np.inf if s.uniformity_distance is None else s.uniformity_distance for s in scores])
    primary = -distinct if direction == "max" else distinct
    chosen = np.lexsort((_ids(scores), uniformity, primary))[:quota] if scores else []
    eviction = ScoreEviction(keep_lowest=direction == "min")
    entries = [replace(_entry(scores[i], distinct[i]), secondary=scores[i].uniformity_distance) for i in chosen]
    return SelectionResult(entries, eviction)


def _embedding(s: SampleScores, model: ToySegModel | None) -> np.ndarray:
    if s.embedding is not None:
        return s.embedding
    if model is None:
        raise ConfigError(f"sample {s.sample_id} has no embedding and no model to compute one")
    return embed(model, s.sample.image)


def diverse_pass(ranked: Sequence[int], embeddings: Sequence[np.ndarray], quota: int,
                 th: float) -> tuple[list[int], list[int]]:
    accepted: list[int] = []
    rejected: list[int] = []
    for i in ranked:
        if len(accepted) == quota:
            break
        if all(cosine_distance(embeddings[i], embeddings[j]) >= th for j in accepted):
            accepted.append(i)
        else:
            rejected.append(i)
    return accepted, rejected


def select_diverse_class_balanced(scores: Sequence[SampleScores], quota: int, model: ToySegModel | None,
                                  th: float = 0.6) -> SelectionResult:
    """Class-balanced ranking that skips samples within ``th`` of an accepted one.

    When the pass ends short of the quota, the best-ranked rejected samples fill
    the remaining slots, then samples without labeled pixels in id order.
    """
    if not 0.0 <= th <= 2.0:
        raise ConfigError("th must lie in [0, 2]")
    warnings: list[str] = []
    eligible = [i for i, s in enumerate(scores) if s.uniformity_distance is not None]
    values = np.array([scores[i].uniformity_distance for i in eligible])
    ranked = [eligible[i] for i in np.lexsort((_ids([scores[i] for i in eligible]), values))]
    embeddings = {i: _embedding(s, model) for i, s in enumerate(scores)}
    accepted, rejected = diverse_pass(ranked, embeddings, quota, th)
    target = min(quota, len(ranked))
    if len(accepted) < target:
        _warn(warnings, f"diversity pass accepted {len(accepted)} of {target}; filling from rejected samples")
        accepted += rejected[: target - len(accepted)]
    if len(accepted) < min(quota, len(scores)):
        _warn(warnings, "not enough labeled samples for the quota; filling with unlabeled ones")
        unlabeled = [i for i in np.argsort(_ids(scores), kind="stable") if scores[i].uniformity_distance is None]
        accepted += [int(i) for i in unlabeled[: min(quota, len(scores)) - len(accepted)]]
    entries = [replace(_entry(scores[i], scores[i].uniformity_distance), embedding=embeddings[i])
               for i in accepted]
    return SelectionResult(entries, DiverseEviction(th), warnings)


@dataclass(frozen=True)
class DiverseEviction:
    """Re-runs the diversity pass over a task's holdings in stored-score order."""

    th: float
    name: str = "reselect-diverse"

    def shrink(self, entries, keep, rng, context):
        values = np.array([np.inf if e.score is None else e.score for e in entries])
        ids = np.array([e.sample.id for e in entries], dtype=np.int64)
        ranked = list(np.lexsort((ids, values)))
        embeddings = {i: entries[i].embedding for i in ranked}
        if any(v is None for v in embeddings.values()):
            return [entries[i] for i in sorted(ranked[:keep])]
        accepted, rejected = diverse_pass(ranked, embeddings, keep, self.th)
        accepted += rejected[: keep - len(accepted)]
        return [entries[i] for i in sorted(accepted)]


def _cosine(u: GradientVector, v: GradientVector) -> float:
    if u.norm == 0.0 or v.norm == 0.0:
        return 0.0
    return float(np.dot(u.values, v.values) / (u.norm * v.norm))


def gss_score(candidate: GradientVector, buffer: Sequence[GradientVector], cmp: int, rng: Rng) -> float:
    """Max gradient cosine similarity to ``cmp`` buffer members drawn without replacement."""
    if not buffer:
        return 0.0
    picks = rng.choice(len(buffer), size=min(cmp, len(buffer)), replace=False)
    return max(_cosine(candidate, buffer[i]) for i in picks)


def select_gss(scores: Sequence[SampleScores], quota: int, cmp: int, rng: Rng) -> SelectionResult:
    """Greedy gradient-based selection over the task stream, in dataset order.

    Once the selection is full, a member is discarded with probability
    proportional to its (non-negative) score and the candidate takes its place.
    """
    chosen: list[int] = []
    chosen_scores: list[float] = []
    for i, s in enumerate(scores):
        if s.gradient is None:
            raise ConfigError(f"sample {s.sample_id} has no gradient")
        score = gss_score(s.gradient, [scores[j].gradient for j in chosen], cmp, rng)
        if len(chosen) < quota:
            chosen.append(i)
            chosen_scores.append(score)
            continue
        if quota == 0:
            continue
        weights = np.maximum(np.array(chosen_scores), 0.0) + GSS_SHIFT
        victim = int(rng.choice(len(chosen), p=weights / weights.sum()))
        chosen[victim] = i
        chosen_scores[victim] = score
    order = np.argsort(chosen, kind="stable")
    return SelectionResult([_entry(scores[chosen[k]], chosen_scores[k]) for k in order],
                           ScoreEviction(keep_lowest=True))


def select_rss(scores: Sequence[SampleScores], model: ToySegModel | None, quota: int, d: int, rng: Rng,
               reducer: Reducer = principal_reducer) -> SelectionResult:
    """Representatives of ``quota`` k-means clusters in a reduced embedding space.

    Identical reduced points are clustered once with their multiplicity as weight.
    Each entry stores its distance to the mean of the task's reduced points;
    shrinking later discards the largest distances.
    """
    eviction = ScoreEviction(keep_lowest=True)
    if not scores or quota < 1:
        return SelectionResult([], eviction)
    ids = _ids(scores)
    points = reduce_dim([_embedding(s, model) for s in scores], d, reducer)
    center_distance = np.linalg.norm(points - points.mean(axis=0), axis=1)
    if len(scores) <= quota:
        chosen = list(range(len(scores)))
    else:
        unique, inverse, counts = np.unique(points, axis=0, return_inverse=True, return_counts=True)
        inverse = inverse.ravel()
        k = min(quota, len(unique))
        clusters = kmeans(unique, k, rng, weights=counts)
        assignment = clusters.assignments[inverse]
        chosen = []
        for cluster in range(k):
            members = np.flatnonzero(assignment == cluster)
            if members.size == 0:
                continue
            distance = np.linalg.norm(points[members] - clusters.centroids[cluster], axis=1)
            chosen.append(int(members[np.lexsort((ids[members], distance))[0]]))
        if len(chosen) < quota:
            taken = set(chosen)
            rest = [i for i in np.lexsort((ids, center_distance)) if i not in taken]
            chosen += [int(i) for i in rest[: quota - len(chosen)]]
    chosen.sort()
    return SelectionResult([_entry(scores[i], center_distance[i]) for i in chosen], eviction)


REQUIRED_SCORES: dict[PolicyId, frozenset[ScoreKind]] = {
    PolicyId.NONE: frozenset(),
    PolicyId.RANDOM: frozenset({ScoreKind.CLASS_STATS}),
    PolicyId.LOSS_MIN: frozenset({ScoreKind.LOSS, ScoreKind.CLASS_STATS}),
    PolicyId.LOSS_MAX: frozenset({ScoreKind.LOSS, ScoreKind.CLASS_STATS}),
    PolicyId.LOSS_MEDIAN: frozenset({ScoreKind.LOSS, ScoreKind.CLASS_STATS}),
    PolicyId.LOSS_MEAN: frozenset({ScoreKind.LOSS, ScoreKind.CLASS_STATS}),
    PolicyId.ENTROPY_MIN: frozenset({ScoreKind.ENTROPY, ScoreKind.CLASS_STATS}),
    PolicyId.ENTROPY_MAX: frozenset({ScoreKind.ENTROPY, ScoreKind.CLASS_STATS}),
    PolicyId.ENTROPY_MEAN: frozenset({ScoreKind.ENTROPY, ScoreKind.CLASS_STATS}),
    PolicyId.BRISQUE: frozenset({ScoreKind.NATURALNESS, ScoreKind.CLASS_STATS}),
    PolicyId.TV_LABEL: frozenset({ScoreKind.TV_LABEL, ScoreKind.CLASS_STATS}),
    PolicyId.TV_IMAGE: frozenset({ScoreKind.TV_IMAGE, ScoreKind.CLASS_STATS}),
    PolicyId.AMBIVALENT: frozenset({ScoreKind.CLASS_STATS}),
    PolicyId.CLASS_BAL_SAMPLES: frozenset({ScoreKind.CLASS_STATS}),
    PolicyId.CLASS_BAL_BUFFER: frozenset({ScoreKind.CLASS_STATS}),
    PolicyId.DIV_CLASS_BAL: frozenset({ScoreKind.CLASS_STATS, ScoreKind.EMBEDDING}),
    PolicyId.GSS: frozenset({ScoreKind.GRADIENT, ScoreKind.CLASS_STATS}),
    PolicyId.RSS: frozenset({ScoreKind.EMBEDDING, ScoreKind.CLASS_STATS}),
}

_SCORE_POLICIES: dict[PolicyId, tuple[str, ScoreSelection | None]] = {
    PolicyId.LOSS_MIN: ("loss", "min"),
    PolicyId.LOSS_MAX: ("loss", "max"),
    PolicyId.LOSS_MEDIAN: ("loss", "median"),
    PolicyId.LOSS_MEAN: ("loss", "mean-nearest"),
    PolicyId.ENTROPY_MIN: ("entropy", "min"),
    PolicyId.ENTROPY_MAX: ("entropy", "max"),
    PolicyId.ENTROPY_MEAN: ("entropy", "mean-nearest"),
    PolicyId.BRISQUE: ("naturalness", None),
    PolicyId.TV_LABEL: ("tv_label", None),
    PolicyId.TV_IMAGE: ("tv_image", None),
}


def select_from_scores(policy: SelectionPolicy, scores: Sequence[SampleScores], quota: int, rng: Rng,
                       model: ToySegModel | None = None, buffer: ReplayBuffer | None = None,
                       classes: Sequence[int] | None = None) -> SelectionResult:
    pid = policy.id
    if pid == PolicyId.NONE:
        return SelectionResult([], RandomEviction())
    if pid == PolicyId.RANDOM:
        return select_random(scores, quota, rng)
    if pid in _SCORE_POLICIES:
        key, kind = _SCORE_POLICIES[pid]
        return select_by_score(scores, quota, kind or policy.resolved_direction(), key)
    if pid == PolicyId.AMBIVALENT:
        return select_ambivalent(scores, quota, policy.resolved_direction())
    if pid == PolicyId.CLASS_BAL_SAMPLES:
        return select_class_balanced_samples(scores, quota, rng)
    if pid == PolicyId.CLASS_BAL_BUFFER:
        existing = post_quota_histogram(buffer, min(quota, len(scores)), classes)
        return select_class_balanced_buffer(scores, quota, existing, classes)
    if pid == PolicyId.DIV_CLASS_BAL:
        return select_diverse_class_balanced(scores, quota, model, policy.th)
    if pid == PolicyId.GSS:
        return select_gss(scores, quota, policy.cmp, rng)
    if pid == PolicyId.RSS:
        return select_rss(scores, model, quota, policy.reduced_dim, rng)
    raise ConfigError(f"unknown policy {pid}")


def select(policy: SelectionPolicy, samples: Sequence[Sample], model: ToySegModel, quota: int, rng: Rng,
           buffer: ReplayBuffer | None = None, task_classes: Sequence[int] | None = None,
           buffer_classes: Sequence[int] | None = None) -> SelectionResult:
    """Score a finished task's samples and choose what enters the buffer.

    ``task_classes`` restricts per-sample uniformity to the task's labeled classes;
    ``buffer_classes`` is the target class set for buffer-level balancing.
    """
    if policy.id == PolicyId.NONE or quota == 0:
        return SelectionResult([], RandomEviction())
    scores = score_dataset(model, samples, REQUIRED_SCORES[policy.id], task_classes)
    result = select_from_scores(policy, scores, quota, rng, model, buffer, buffer_classes)
    logger.info("%s selected %d of %d samples", policy.id.value, len(result.entries), len(samples))
    return result


def eviction_for(policy: SelectionPolicy, classes: Sequence[int] | None = None) -> EvictionRule:
    """The shrink rule a policy applies to tasks it filled earlier."""
    pid = policy.id
    if pid in (PolicyId.NONE, PolicyId.RANDOM):
        return RandomEviction()
    if pid in _SCORE_POLICIES:
        key, kind = _SCORE_POLICIES[pid]
        return _score_eviction(kind or policy.resolved_direction())
    if pid == PolicyId.AMBIVALENT:
        return ScoreEviction(keep_lowest=policy.resolved_direction() == "min")
    if pid == PolicyId.CLASS_BAL_BUFFER:
        return GreedyBalanceEviction(tuple(sorted(classes)) if classes is not None else None)
    if pid == PolicyId.DIV_CLASS_BAL:
        return DiverseEviction(policy.th)
    return ScoreEviction(keep_lowest=True)
