"""Test Adam and the learning-rate schedule."""

import numpy as np
import pytest

from cvrscale.errors import ContractError
from cvrscale.numerics import Tensor
from cvrscale.optim import AdamState, LrSchedule, adam_step, lr_at


def test_adam_first_step_moves_by_lr() -> None:
    params = {"w": Tensor([1.0, -2.0], requires_grad=True), "frozen": Tensor([5.0])}
    state = AdamState()
    adam_step(params, {"w": np.array([0.5, -3.0])}, state, lr=0.1)
    # bias-corrected first step is lr * sign(grad)
    np.testing.assert_allclose(params["w"].data, [0.9, -1.9], atol=1e-6)
    assert params["frozen"].data.tolist() == [5.0]
    assert state.step == 1
    assert sorted(state.m) == ["w"]


def test_adam_keeps_graph_values() -> None:
    weight = Tensor([1.0], requires_grad=True)
    before = weight.data
    adam_step({"w": weight}, {"w": np.array([1.0])}, AdamState(), lr=0.5)
    assert before.tolist() == [1.0]
    assert weight.data.tolist() != [1.0]


def test_adam_contract() -> None:
    params = {"w": Tensor([1.0, 2.0], requires_grad=True)}
    with pytest.raises(ContractError, match="Failed `adam_step`, `w` is"):
        adam_step(params, {"w": np.zeros(3)}, AdamState(), lr=0.1)
    with pytest.raises(ContractError, match="learning rate must be non-negative"):
        adam_step(params, {"w": np.zeros(2)}, AdamState(), lr=-1.0)


def test_schedule_shape() -> None:
    sched = LrSchedule(warmup_steps=4, total_steps=12, lr_peak=2.0, lr_final=0.5)
    rates = [lr_at(sched, step) for step in range(13)]
    assert rates[:5] == [0.0, 0.5, 1.0, 1.5, 2.0]
    assert rates[-1] == pytest.approx(0.5)
    assert all(lo >= hi for lo, hi in zip(rates[4:], rates[5:]))


def test_schedule_without_decay() -> None:
    sched = LrSchedule(warmup_steps=3, total_steps=3, lr_peak=1.0, lr_final=0.25)
    assert [lr_at(sched, step) for step in range(4)] == pytest.approx([0.0, 1 / 3, 2 / 3, 0.25])


def test_schedule_contract() -> None:
    with pytest.raises(ContractError, match="Schedule needs 0 <= warmup_steps <= total_steps"):
        LrSchedule(warmup_steps=5, total_steps=4, lr_peak=1.0)
    with pytest.raises(ContractError, match="Learning rates must be non-negative"):
        LrSchedule(warmup_steps=0, total_steps=4, lr_peak=-1.0)
    with pytest.raises(ContractError, match="Failed `lr_at`, step 5 outside"):
        lr_at(LrSchedule(warmup_steps=0, total_steps=4, lr_peak=1.0), 5)
