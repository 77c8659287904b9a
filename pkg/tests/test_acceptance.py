"""End-to-end statistical suites over many seeds; run with ``pytest -m slow``."""
import itertools

import numpy as np
import pytest

from continual.clustering import reduce_dim
from continual.harness import run_continual
from continual.model import init_model
from continual.policies import score_order, select_class_balanced_buffer, select_gss, select_random, select_rss
from continual.schemas import PolicyId, RunConfig, ScenarioSpec
from continual.scoring import ScoreKind, score_dataset
from continual.synthdata import generate_scenario
from continual.types import ClassHistogram, Rng

pytestmark = pytest.mark.slow

SEEDS = range(10)


def pool(seed: int, per_task: int = 40):
    spec = ScenarioSpec.class_incremental(height=16, width=16, train_per_task=[per_task] * 3, val_per_task=[1] * 3)
    return generate_scenario(spec, Rng(seed))


def l1_to_uniform(histograms, classes) -> float:
    total = sum(histograms, ClassHistogram.zeros(10)).counts[classes].astype(np.float64)
    return float(np.abs(total / total.sum() - 1.0 / len(classes)).sum())


def mean_pairwise_cosine(vectors) -> float:
    sims = [np.dot(u, v) / (np.linalg.norm(u) * np.linalg.norm(v)) for u, v in itertools.combinations(vectors, 2)]
    return float(np.mean(sims))


def quantization_error(points: np.ndarray, chosen) -> float:
    distances = np.linalg.norm(points[:, None, :] - points[list(chosen)][None, :, :], axis=2)
    return float(distances.min(axis=1).mean())


# Test median selections sit between the min and max selections
def test_median_entropy_between_extremes():
    for seed in range(25):
        task = pool(seed)[1]
        model = init_model(7, Rng(seed), patch_size=3, hidden_widths=(8, 8))
        scores = score_dataset(model, task.train_samples, {ScoreKind.ENTROPY})
        values = np.array([s.entropy for s in scores])
        ids = np.array([s.sample_id for s in scores])
        low = values[score_order(values, ids, 10, "min")]
        high = values[score_order(values, ids, 10, "max")]
        median = values[score_order(values, ids, 10, "median")]
        assert low.max() <= median.min() and median.max() <= high.min()

# Test buffer-level class balancing beats random selection
def test_class_balance_win_rate():
    wins = 0
    for seed in range(50):
        task = pool(seed)[0]
        classes = sorted(task.labeled_classes)
        model = init_model(4, Rng(seed), patch_size=3, hidden_widths=(4, 4))
        scores = score_dataset(model, task.train_samples, {ScoreKind.CLASS_STATS}, classes)
        balanced = select_class_balanced_buffer(scores, 10, classes=classes)
        random_distance = np.mean([
            l1_to_uniform([e.histogram for e in select_random(scores, 10, Rng(seed, (draw,))).entries], classes)
            for draw in range(20)])
        wins += l1_to_uniform([e.histogram for e in balanced.entries], classes) <= random_distance
    assert wins >= 45

# Test GSS keeps a more diverse gradient set than random selection
def test_gss_diversity():
    wins = 0
    for seed in range(25):
        task = pool(seed)[1]
        model = init_model(7, Rng(seed), patch_size=3, hidden_widths=(8, 8))
        scores = score_dataset(model, task.train_samples, {ScoreKind.GRADIENT})
        gss = select_gss(scores, 8, 5, Rng(seed, (1,)))
        rand = select_random(scores, 8, Rng(seed, (2,)))
        grads = {s.sample_id: s.gradient.values for s in scores}
        wins += mean_pairwise_cosine([grads[i] for i in gss.ids]) < mean_pairwise_cosine([grads[i] for i in rand.ids])
    assert wins >= 20

# Test RSS covers the embedding space at least as well as random selection
def test_rss_coverage():
    wins = 0
    for seed in range(25):
        task = pool(seed)[1]
        model = init_model(7, Rng(seed), patch_size=3, hidden_widths=(8, 8))
        scores = score_dataset(model, task.train_samples, {ScoreKind.EMBEDDING})
        points = reduce_dim([s.embedding for s in scores], 2)
        position = {s.sample_id: i for i, s in enumerate(scores)}
        rss = [position[i] for i in select_rss(scores, model, 8, 2, Rng(seed, (1,))).ids]
        rand = [position[i] for i in select_random(scores, 8, Rng(seed, (2,))).ids]
        wins += quantization_error(points, rss) <= quantization_error(points, rand)
    assert wins >= 23


def suite_config(seed: int, policy: PolicyId, buffer_size: int, **extra) -> RunConfig:
    return RunConfig(seed=seed, patch_size=5, hidden_widths=(32, 16), epochs=10, batch_size=8,
                     learning_rate=2e-3, buffer_size=buffer_size, policy=policy, cka_pixels=1000, **extra)


@pytest.fixture(scope="module")
def class_suite(tmp_path_factory):
    out = tmp_path_factory.mktemp("class_suite")
    runs = {}
    for seed in SEEDS:
        spec = ScenarioSpec.class_incremental(height=16, width=16, train_per_task=[60] * 3, val_per_task=[20] * 3)
        tasks = generate_scenario(spec, Rng(100 + seed))
        variants = {
            "finetune": suite_config(seed, PolicyId.NONE, 0),
            "distill": suite_config(seed, PolicyId.NONE, 0, distillation="on"),
            "random": suite_config(seed, PolicyId.RANDOM, 64),
            "balanced": suite_config(seed, PolicyId.CLASS_BAL_BUFFER, 64),
        }
        for name, config in variants.items():
            runs[name, seed] = run_continual(config, tasks, out / f"{name}_{seed}").metrics
    return runs


# Test fine-tuning forgets the first task's classes
def test_finetune_forgets_first_task(class_suite):
    for seed in SEEDS:
        steps = class_suite["finetune", seed].steps
        assert steps[-1].subset_miou["0"] < 0.3 * steps[0].subset_miou["0"]

# Test replay beats distillation alone on the exclusive classes
def test_replay_beats_distillation_on_exclusive_classes(class_suite):
    wins = sum(class_suite["random", s].steps[-1].exclusive_miou > class_suite["distill", s].steps[-1].exclusive_miou
               for s in SEEDS)
    assert wins >= 7

# Test class-balanced replay against the random mean
def test_balanced_replay_beats_random_mean(class_suite):
    random_mean = np.mean([class_suite["random", s].steps[-1].exclusive_miou for s in SEEDS])
    wins = sum(class_suite["balanced", s].steps[-1].exclusive_miou >= random_mean for s in SEEDS)
    assert wins >= 7

# Test class-balanced replay shows less recency bias than fine-tuning
def test_balanced_replay_has_less_recency_bias(class_suite):
    for seed in SEEDS:
        balanced = class_suite["balanced", seed].steps[-1].exclusive_recency_bias
        finetune = class_suite["finetune", seed].steps[-1].exclusive_recency_bias
        assert balanced < finetune


@pytest.fixture(scope="module")
def domain_suite(tmp_path_factory):
    out = tmp_path_factory.mktemp("domain_suite")
    runs = {}
    for seed in SEEDS:
        spec = ScenarioSpec.domain_incremental(height=16, width=16, train_per_task=[80, 80], val_per_task=[20, 20])
        tasks = generate_scenario(spec, Rng(200 + seed))
        for name, config in (("finetune", suite_config(seed, PolicyId.NONE, 0)),
                             ("random", suite_config(seed, PolicyId.RANDOM, 64))):
            runs[name, seed] = run_continual(config, tasks, out / f"{name}_{seed}").metrics
    return runs


# Test replay keeps the old domain better than fine-tuning
def test_replay_keeps_old_domain(domain_suite):
    wins = sum(domain_suite["random", s].steps[-1].task_miou[0] > domain_suite["finetune", s].steps[-1].task_miou[0]
               for s in SEEDS)
    assert wins >= 8

# Test replay stabilizes the hidden representations
def test_replay_stabilizes_representations(domain_suite):
    def drift(metrics, layer):
        return next(r.value for r in metrics.cka if r.layer == layer and r.step == 1)

    for layer in ("h1", "h2"):
        wins = sum(drift(domain_suite["random", s], layer) >= drift(domain_suite["finetune", s], layer)
                   for s in SEEDS)
        assert wins >= 8

# Test smaller buffers spread the policies further apart
def test_small_buffer_spreads_policies(tmp_path):
    policies = (PolicyId.RANDOM, PolicyId.LOSS_MIN, PolicyId.ENTROPY_MAX, PolicyId.CLASS_BAL_BUFFER)
    spreads = {16: [], 128: []}
    for seed in range(3):
        spec = ScenarioSpec.domain_incremental(height=16, width=16, train_per_task=[80, 80], val_per_task=[20, 20])
        tasks = generate_scenario(spec, Rng(300 + seed))
        for size in spreads:
            finals = [run_continual(suite_config(seed, p, size), tasks,
                                    tmp_path / f"{p.value}_{size}_{seed}").metrics.steps[-1].all_miou
                      for p in policies]
            spreads[size].append(max(finals) - min(finals))
    assert np.mean(spreads[16]) > np.mean(spreads[128])
