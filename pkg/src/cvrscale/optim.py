"""Adam optimizer and the warm-up + cosine learning-rate schedule."""

import math
from dataclasses import dataclass, field
from typing import Dict, Mapping

import numpy as np

from cvrscale.errors import ContractError
from cvrscale.numerics import Tensor

#: defaults are configuration choices, the source recipe does not state them
DEFAULT_BETA1 = 0.9
DEFAULT_BETA2 = 0.999
DEFAULT_EPS = 1e-8


@dataclass
class AdamState:
    """Moments and step counter keyed by parameter name."""

    beta1: float = DEFAULT_BETA1
    beta2: float = DEFAULT_BETA2
    eps: float = DEFAULT_EPS
    lr_peak: float = 1e-3
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], state: AdamState, lr: float) -> None:
    """Apply one bias-corrected Adam update in place of ``params[name].data``.

    Parameters without an entry in ``grads`` keep their values but the shared step counter still advances.

    Args:
        params: trainable tensors by name
        grads: gradient arrays by name, same shapes as the parameters
        state: optimizer state, updated in place
        lr: learning rate for this step

    Raises:
        ContractError: if a gradient shape differs from its parameter or ``lr`` is negative

    """
    if lr < 0:
        raise ContractError(f"Failed `adam_step`, learning rate must be non-negative, got {lr}")
    for name, grad in grads.items():
        if params[name].shape != grad.shape:
            raise ContractError(f"Failed `adam_step`, `{name}` is {params[name].shape} but grad is {grad.shape}")
    state.step += 1
    corr1 = 1.0 - state.beta1**state.step
    corr2 = 1.0 - state.beta2**state.step
    for name in sorted(grads):
        grad = grads[name]
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1.0 - state.beta1) * grad if m is None else state.beta1 * m + (1.0 - state.beta1) * grad
        v = (1.0 - state.beta2) * grad * grad if v is None else state.beta2 * v + (1.0 - state.beta2) * grad * grad
        state.m[name], state.v[name] = m, v
        update = lr * (m / corr1) / (np.sqrt(v / corr2) + state.eps)
        # fresh array, values already handed to a graph stay untouched
        params[name].data = params[name].data - update


@dataclass(frozen=True)
class LrSchedule:
    """Linear warm-up to ``lr_peak`` then cosine decay to ``lr_final`` at ``total_steps``."""

    warmup_steps: int
    total_steps: int
    lr_peak: float
    lr_final: float = 0.0

    def __post_init__(self) -> None:
        if not 0 <= self.warmup_steps <= self.total_steps:
            raise ContractError(
                f"Schedule needs 0 <= warmup_steps <= total_steps, got {self.warmup_steps} / {self.total_steps}"
            )
        if self.lr_peak < 0 or self.lr_final < 0:
            raise ContractError(f"Learning rates must be non-negative, got {self.lr_peak} / {self.lr_final}")


def lr_at(schedule: LrSchedule, step: int) -> float:
    """Learning rate at ``step``; the last step always gives ``lr_final``.

    Example:
        >>> sched = LrSchedule(warmup_steps=10, total_steps=110, lr_peak=1.0, lr_final=0.0)
        >>> lr_at(sched, 5), lr_at(sched, 10), lr_at(sched, 60), lr_at(sched, 110)
        (0.5, 1.0, 0.5, 0.0)

    """
    if not 0 <= step <= schedule.total_steps:
        raise ContractError(f"Failed `lr_at`, step {step} outside [0, {schedule.total_steps}]")
    if step < schedule.warmup_steps:
        return schedule.lr_peak * step / schedule.warmup_steps
    decay_steps = schedule.total_steps - schedule.warmup_steps
    if decay_steps == 0:
        # warm-up fills the whole run; its last step still ends on `lr_final`
        return schedule.lr_final
    progress = (step - schedule.warmup_steps) / decay_steps
    return schedule.lr_final + 0.5 * (schedule.lr_peak - schedule.lr_final) * (1.0 + math.cos(math.pi * progress))
