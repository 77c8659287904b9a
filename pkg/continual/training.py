"""Mini-batch training of one task, optionally mixed with replay and distillation."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from continual.buffer import ReplayBuffer, retrieve_uniform
from continual.errors import ConfigError, TrainingDivergedError
from continual.model import ToySegModel, loss_and_gradient
from continual.optim import adam_poly_step, new_optimizer
from continual.schemas import RunConfig
from continual.types import Rng, Sample

logger = logging.getLogger(__name__)


@dataclass
class LossTrace:
    step_losses: list[float] = field(default_factory=list)
    epoch_means: list[float] = field(default_factory=list)


def _batches(samples: Sequence[Sample], config: RunConfig, replay: ReplayBuffer | None, rng: Rng):
    """Yield the batches of one epoch."""
    pool = list(samples)
    replaying = replay is not None and len(replay) > 0
    if replaying and config.replay_mix == "concat":
        pool += replay.samples()
        order = rng.permutation(len(pool))
        for start in range(0, len(pool), config.batch_size):
            yield [pool[i] for i in order[start:start + config.batch_size]]
        return
    n_replay = max(1, round(config.replay_ratio * config.batch_size)) if replaying else 0
    n_task = max(1, config.batch_size - n_replay)
    order = rng.permutation(len(pool))
    for start in range(0, len(pool), n_task):
        batch = [pool[i] for i in order[start:start + n_task]]
        yield batch + retrieve_uniform(replay, n_replay, rng) if replaying else batch


def batches_per_epoch(n_samples: int, config: RunConfig, replay: ReplayBuffer | None) -> int:
    replaying = replay is not None and len(replay) > 0
    if replaying and config.replay_mix == "concat":
        return math.ceil((n_samples + len(replay)) / config.batch_size)
    n_replay = max(1, round(config.replay_ratio * config.batch_size)) if replaying else 0
    return math.ceil(n_samples / max(1, config.batch_size - n_replay))


def train_task(model: ToySegModel, samples: Sequence[Sample], config: RunConfig, rng: Rng,
               teacher: ToySegModel | None = None, old_classes: Sequence[int] = (),
               replay: ReplayBuffer | None = None) -> tuple[ToySegModel, LossTrace]:
    """Run ``config.epochs`` epochs of shuffled Adam steps over the task (and replay) data.

    With a teacher and a non-empty ``old_classes`` the loss is ``loss_cil``,
    otherwise ``loss_ce``. The polynomial schedule spans this task's steps only.
    """
    if not samples:
        raise ConfigError("training set is empty")
    trace = LossTrace()
    if config.epochs == 0:
        return model, trace
    old = tuple(old_classes) if teacher is not None else ()
    total_steps = config.epochs * batches_per_epoch(len(samples), config, replay)
    opt = new_optimizer(model, config.learning_rate, config.poly_power, total_steps)
    for epoch in range(config.epochs):
        epoch_losses = []
        for batch in _batches(samples, config, replay, rng.substream("epoch", epoch)):
            loss, grads = loss_and_gradient(model, batch, teacher, old, config.distill_weight)
            if not np.isfinite(loss):
                raise TrainingDivergedError(opt.step, "non-finite loss")
            model, opt = adam_poly_step(model, grads, opt)
            epoch_losses.append(loss)
        trace.step_losses.extend(epoch_losses)
        trace.epoch_means.append(float(np.mean(epoch_losses)))
        logger.debug("epoch %d: mean loss %.4f", epoch, trace.epoch_means[-1])
    logger.info("trained %d steps, loss %.4f -> %.4f", opt.step, trace.epoch_means[0], trace.epoch_means[-1])
    return model, trace
