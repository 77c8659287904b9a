import numpy as np
import pytest

from continual.buffer import BufferEntry, ReplayBuffer
from continual.errors import ConfigError, TrainingDivergedError
from continual.model import GradientVector, forward, init_model, loss_ce
from continual.optim import adam_poly_step, new_optimizer, poly_lr
from continual.schemas import RunConfig
from continual.training import batches_per_epoch, train_task
from continual.types import Rng
from tests.helpers import make_sample


def stripes(n: int, task_id: int = 0, offset: int = 0):
    """Samples whose label is a function of the red channel."""
    samples = []
    for i in range(n):
        image = np.zeros((3, 6, 6))
        image[0, :, :3] = 1.0
        labels = np.zeros((6, 6), dtype=np.uint8)
        labels[:, :3] = 1
        shift = i % 3
        samples.append(make_sample(offset + i, np.roll(labels, shift, axis=1), task_id,
                                   image=np.roll(image, shift, axis=2)))
    return samples


# Test the polynomial schedule
def test_poly_lr():
    assert poly_lr(1e-3, 0, 10, 0.9) == 1e-3
    assert np.isclose(poly_lr(1e-3, 5, 10, 1.0), 5e-4)
    assert poly_lr(1e-3, 10, 10, 0.9) == 0.0

# Test the first Adam step moves every coordinate by the learning rate
def test_adam_first_step_is_sign_of_gradient():
    model = init_model(2, Rng(0), patch_size=3, hidden_widths=(4, 4))
    grads = GradientVector.from_parts({k: np.ones_like(v, dtype=np.float64) for k, v in model.params.items()})
    opt = new_optimizer(model, base_lr=1e-2, total_steps=10)
    updated, opt = adam_poly_step(model, grads, opt)
    assert opt.step == 1
    assert np.allclose(model.flat() - updated.flat(), 1e-2, atol=1e-6)

# Test the optimizer past its planned steps
def test_adam_rejects_extra_steps():
    model = init_model(2, Rng(0), patch_size=3, hidden_widths=(4, 4))
    grads = GradientVector.from_parts({k: np.zeros_like(v, dtype=np.float64) for k, v in model.params.items()})
    opt = new_optimizer(model, total_steps=1)
    model, opt = adam_poly_step(model, grads, opt)
    with pytest.raises(ConfigError):
        adam_poly_step(model, grads, opt)

# Test a non-finite gradient
def test_adam_non_finite_gradient_diverges():
    model = init_model(2, Rng(0), patch_size=3, hidden_widths=(4, 4))
    parts = {k: np.zeros_like(v, dtype=np.float64) for k, v in model.params.items()}
    parts["b3"][0] = np.nan
    with pytest.raises(TrainingDivergedError) as info:
        adam_poly_step(model, GradientVector.from_parts(parts), new_optimizer(model, total_steps=5))
    assert info.value.step == 0

# Test training reduces the loss
def test_train_task_reduces_loss():
    samples = stripes(12)
    config = RunConfig(patch_size=3, hidden_widths=(8, 6), epochs=15, batch_size=4, learning_rate=1e-2)
    model = init_model(2, Rng(0), patch_size=3, hidden_widths=(8, 6))
    before = np.mean([loss_ce(forward(model, s.image), s.labels).loss for s in samples])
    model, trace = train_task(model, samples, config, Rng(1))
    after = np.mean([loss_ce(forward(model, s.image), s.labels).loss for s in samples])
    assert after < before
    assert len(trace.epoch_means) == 15
    assert len(trace.step_losses) == 15 * 3

# Test zero epochs
def test_train_task_zero_epochs_is_identity():
    model = init_model(2, Rng(0), patch_size=3, hidden_widths=(4, 4))
    config = RunConfig(patch_size=3, hidden_widths=(4, 4), epochs=0)
    trained, trace = train_task(model, stripes(2), config, Rng(1))
    assert trained is model
    assert trace.epoch_means == []

# Test an empty training set
def test_train_task_empty_set():
    model = init_model(2, Rng(0), patch_size=3, hidden_widths=(4, 4))
    with pytest.raises(ConfigError):
        train_task(model, [], RunConfig(patch_size=3, hidden_widths=(4, 4)), Rng(1))

# Test training determinism
def test_train_task_is_deterministic():
    config = RunConfig(patch_size=3, hidden_widths=(4, 4), epochs=3, batch_size=4)
    model = init_model(2, Rng(0), patch_size=3, hidden_widths=(4, 4))
    a, _ = train_task(model, stripes(6), config, Rng(9))
    b, _ = train_task(model, stripes(6), config, Rng(9))
    assert np.array_equal(a.flat(), b.flat())

# Test the number of steps under both replay mixes
def test_batches_per_epoch_with_replay():
    buffer = ReplayBuffer(8, 2, entries=[BufferEntry(s, None, 0) for s in stripes(4)])
    concat = RunConfig(batch_size=4, replay_mix="concat")
    ratio = RunConfig(batch_size=4, replay_mix="ratio", replay_ratio=0.5)
    assert batches_per_epoch(10, concat, buffer) == 4
    assert batches_per_epoch(10, ratio, buffer) == 5
    assert batches_per_epoch(10, concat, None) == 3

# Test training with replay samples mixed in
def test_train_task_with_ratio_replay():
    old = stripes(4, task_id=0)
    buffer = ReplayBuffer(8, 2, entries=[BufferEntry(s, None, 0) for s in old])
    config = RunConfig(patch_size=3, hidden_widths=(4, 4), epochs=2, batch_size=4, replay_mix="ratio")
    model = init_model(2, Rng(0), patch_size=3, hidden_widths=(4, 4))
    _, trace = train_task(model, stripes(6, task_id=1, offset=10), config, Rng(2), replay=buffer)
    assert len(trace.step_losses) == 2 * 3
