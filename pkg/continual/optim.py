"""Adam with a polynomial learning-rate decay."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from continual.errors import ConfigError, ShapeError, TrainingDivergedError
from continual.model import GradientVector, ToySegModel


@dataclass(frozen=True)
class OptimizerState:
    first_moment: np.ndarray
    second_moment: np.ndarray
    step: int
    base_lr: float
    power: float
    total_steps: int
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def new_optimizer(model: ToySegModel, base_lr: float = 4e-4, power: float = 0.9,
                  total_steps: int = 1) -> OptimizerState:
    if base_lr <= 0 or power <= 0:
        raise ConfigError("learning rate and poly power must be positive")
    zeros = np.zeros(model.num_parameters)
    return OptimizerState(zeros, zeros.copy(), 0, base_lr, power, max(total_steps, 1))


def poly_lr(base_lr: float, step: int, total_steps: int, power: float) -> float:
    return base_lr * (1.0 - step / total_steps) ** power


def adam_poly_step(model: ToySegModel, grads: GradientVector,
                   opt: OptimizerState) -> tuple[ToySegModel, OptimizerState]:
    if opt.step >= opt.total_steps:
        raise ConfigError(f"step {opt.step} is past the planned {opt.total_steps} steps")
    g = grads.values
    if g.shape != opt.first_moment.shape:
        raise ShapeError("gradient length does not match the optimizer state")
    if not np.all(np.isfinite(g)):
        raise TrainingDivergedError(opt.step, "non-finite gradient")
    lr = poly_lr(opt.base_lr, opt.step, opt.total_steps, opt.power)
    m = opt.beta1 * opt.first_moment + (1.0 - opt.beta1) * g
    v = opt.beta2 * opt.second_moment + (1.0 - opt.beta2) * g * g
    t = opt.step + 1
    m_hat = m / (1.0 - opt.beta1**t)
    v_hat = v / (1.0 - opt.beta2**t)
    updated = model.flat() - lr * m_hat / (np.sqrt(v_hat) + opt.eps)
    return model.with_flat(updated), replace(opt, first_moment=m, second_moment=v, step=t)
