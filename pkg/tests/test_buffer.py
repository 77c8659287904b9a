from dataclasses import replace

import numpy as np
import pytest
from scipy.stats import chisquare

from continual.buffer import (BufferEntry, RandomEviction, ReplayBuffer, ScoreEviction, manifest, quota,
                              read_manifest, retrieve_uniform, settle_new_task, shrink_earlier_tasks, write_manifest)
from continual.errors import ConfigError, InvariantViolation
from continual.types import ClassHistogram, Rng
from tests.helpers import make_sample


def entries(task_id: int, n: int, start: int, scores=None):
    return [BufferEntry(make_sample(start + i, np.full((2, 2), task_id), task_id),
                        None if scores is None else scores[i], task_id) for i in range(n)]


# Test the quota split
def test_quota_examples():
    assert quota(64, 2) == [32, 32]
    assert quota(64, 3) == [22, 21, 21]
    assert quota(5, 8) == [1, 1, 1, 1, 1, 0, 0, 0]
    assert quota(0, 2) == [0, 0]
    with pytest.raises(ConfigError):
        quota(4, 0)

# Test the quota redistribution of unused slots
def test_quota_redistributes_spare_slots():
    assert quota(10, 2, [3, 20]) == [3, 7]
    assert quota(10, 3, [1, 1, 50]) == [1, 1, 8]
    assert sum(quota(10, 2, [2, 2])) == 4

# Test entries must come from their own task
def test_buffer_entry_provenance():
    with pytest.raises(InvariantViolation):
        BufferEntry(make_sample(0, np.zeros((2, 2)), 1), None, 0)
    with pytest.raises(InvariantViolation):
        BufferEntry(make_sample(0, np.zeros((2, 2)), 0), float("nan"), 0)

# Test settling three tasks never exceeds capacity
def test_settle_three_tasks_capacity_and_quotas(rng):
    sizes = []
    buffer = ReplayBuffer(64, 3, observer=sizes.append)
    for k in range(3):
        buffer = settle_new_task(buffer, entries(k, 40, 100 * k), RandomEviction(), rng.substream("t", k), k)
    assert buffer.quotas == [22, 21, 21]
    assert buffer.counts() == [22, 21, 21]
    assert max(sizes) <= 64
    assert all(e.inserted_at <= 2 for e in buffer.entries)

# Test a task with fewer samples than its quota
def test_settle_small_task_lends_slots(rng):
    buffer = settle_new_task(ReplayBuffer(10, 2), entries(0, 10, 0), RandomEviction(), rng, 0)
    buffer = settle_new_task(buffer, entries(1, 2, 50), RandomEviction(), rng, 1)
    assert buffer.counts() == [8, 2]

# Test score eviction keeps the lowest scores
def test_score_eviction_keeps_lowest(rng):
    first = entries(0, 6, 0, scores=[5.0, 1.0, 3.0, 0.5, 9.0, 1.0])
    buffer = settle_new_task(ReplayBuffer(6, 2), first, ScoreEviction(keep_lowest=True), rng, 0)
    buffer = settle_new_task(buffer, entries(1, 3, 10, scores=[0.0] * 3), ScoreEviction(keep_lowest=True), rng, 1)
    kept = sorted(e.sample.id for e in buffer.entries if e.inserted_at == 0)
    assert kept == [1, 3, 5]

# Test score ties fall to the secondary key before the id
def test_score_eviction_secondary_key(rng):
    held = [replace(e, secondary=s) for e, s in zip(entries(0, 4, 0, scores=[2.0, 2.0, 2.0, 1.0]),
                                                    [0.9, None, 0.1, 0.0])]
    kept = ScoreEviction(keep_lowest=False).shrink(held, 2, rng, ClassHistogram.zeros(1))
    assert [e.sample.id for e in kept] == [0, 2]

# Test previewing the shrink leaves the buffer untouched
def test_shrink_earlier_tasks_is_a_copy(rng):
    buffer = settle_new_task(ReplayBuffer(4, 2), entries(0, 4, 0, scores=[3.0, 1.0, 2.0, 0.0]),
                             ScoreEviction(keep_lowest=True), rng, 0)
    shrunk, quotas = shrink_earlier_tasks(buffer, 1, 2, ScoreEviction(keep_lowest=True), rng)
    assert quotas == [2, 2]
    assert sorted(e.sample.id for e in shrunk.entries) == [1, 3]
    assert len(buffer) == 4

# Test the policy offering more than its quota
def test_settle_truncates_with_warning(rng):
    buffer = settle_new_task(ReplayBuffer(3, 1), entries(0, 5, 0), RandomEviction(), rng, 0)
    assert len(buffer) == 3
    assert buffer.warnings and "extra entries dropped" in buffer.warnings[0]

# Test settling an empty task
def test_settle_empty_task_keeps_old_entries(rng):
    buffer = settle_new_task(ReplayBuffer(4, 1), entries(0, 4, 0), RandomEviction(), rng, 0)
    buffer = settle_new_task(buffer, [], RandomEviction(), rng, 1)
    assert buffer.counts() == [4, 0]

# Test uniform retrieval
def test_retrieve_uniform_chi_square():
    buffer = ReplayBuffer(10, 1, entries=entries(0, 10, 0))
    draws = retrieve_uniform(buffer, 100_000, Rng(42))
    counts = np.bincount([s.id for s in draws], minlength=10)
    assert chisquare(counts).pvalue > 0.01
    assert retrieve_uniform(ReplayBuffer(10, 1), 5, Rng(1)) == []

# Test the buffer manifest file
def test_manifest_file(tmp_path, rng):
    buffer = settle_new_task(ReplayBuffer(4, 1), entries(0, 4, 0, scores=[1.0, 2.0, 3.0, 4.0]),
                             ScoreEviction(), rng, 0)
    write_manifest(buffer, tmp_path / "m.json")
    record = read_manifest(tmp_path / "m.json")
    assert record == manifest(buffer)
    assert [e.sample_id for e in record.entries] == [0, 1, 2, 3]
    assert record.histogram == [16]
