"""Test the listwise loss, training loop, warmstart and throughput measurement."""

import math
from pathlib import Path

import numpy as np
import pytest

from cvrscale.checkpoint import save_checkpoint
from cvrscale.config import MaskNetConfig, ScheduleConfig
from cvrscale.errors import ContractError, IncompatibleCheckpointError, MeasurementError, TrainingDivergedError
from cvrscale.features import fit_norm_stats
from cvrscale.model import CvrModel
from cvrscale.numerics import Tensor
from cvrscale.synth import canonical_schema, project
from cvrscale.training import (
    GroupBatches,
    RankingGroup,
    batch_losses,
    batched_listwise_loss,
    check_groups,
    evaluate_loss,
    initial_model,
    listwise_loss,
    measure_throughput,
    metrics_columns,
    split_by_day,
    total_loss,
    train,
    warmstart_load,
)
from cvrscale.utils import SplitMix64
from tests.collection_models import TINY_BACKBONES, TINY_SYNTH, check_gradients, tiny_dataset, tiny_run_config


def _train_groups() -> list:
    train_groups, _ = split_by_day(tiny_dataset().groups, holdout_days=1)
    return train_groups


def test_listwise_loss_values() -> None:
    assert listwise_loss(Tensor([0.0, 0.0]), np.array([1, 0])).item() == pytest.approx(math.log(2.0))
    expected = math.log(math.e + math.e**2 + math.e**3) - 3.0
    assert listwise_loss(Tensor([1.0, 2.0, 3.0]), np.array([0, 0, 1])).item() == pytest.approx(expected)


def test_group_without_positive_adds_zero() -> None:
    logits = Tensor([0.0, 0.0, 1.0, -1.0], requires_grad=True)
    loss, per_group = batched_listwise_loss(logits, np.array([0, 2, 4]), np.array([1.0, 0.0, 0.0, 0.0]))
    assert per_group.tolist() == pytest.approx([math.log(2.0), 0.0])
    assert loss.item() == pytest.approx(math.log(2.0) / 2)


def test_listwise_gradient() -> None:
    logits = Tensor(SplitMix64(1).normal(7), requires_grad=True, name="logits")
    labels = np.array([1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0])
    check_gradients(lambda: batched_listwise_loss(logits, np.array([0, 3, 5, 7]), labels)[0], [logits])


def test_listwise_contract() -> None:
    with pytest.raises(ContractError, match="Group offsets must run from 0 to 3"):
        batched_listwise_loss(Tensor([0.0, 1.0, 2.0]), np.array([0, 2]), np.zeros(3))
    with pytest.raises(ContractError, match="Every group needs at least one item"):
        batched_listwise_loss(Tensor([0.0, 1.0]), np.array([0, 0, 2]), np.zeros(2))
    with pytest.raises(ContractError, match="Labels"):
        batched_listwise_loss(Tensor([0.0, 1.0]), np.array([0, 2]), np.zeros(3))
    with pytest.raises(ContractError, match="at least one task"):
        total_loss({})
    assert total_loss({"b": Tensor(2.0), "a": Tensor(1.0)}).item() == 3.0


def test_group_contract() -> None:
    with pytest.raises(ContractError, match="has no items"):
        RankingGroup(1, 0, [], {"purchase": []})
    with pytest.raises(ContractError, match="Labels `click` of group 2"):
        RankingGroup(2, 0, [{}, {}], {"click": [1.0]})
    groups = [RankingGroup(3, 0, [{}, {}], {"purchase": [0.0, 0.0], "click": [1.0, 0.0]})]
    with pytest.raises(ContractError, match="has no `purchase` positive"):
        check_groups(groups, ("purchase", "click"))
    with pytest.raises(ContractError, match="lacks labels for"):
        check_groups(groups, ("purchase", "view"))


def test_split_by_day() -> None:
    dataset = tiny_dataset()
    train_groups, eval_groups = split_by_day(dataset.groups, holdout_days=1)
    assert {g.day for g in train_groups} == {0, 1}
    assert {g.day for g in eval_groups} == {2}
    with pytest.raises(ContractError, match="Cannot hold out 3 of 3 days"):
        split_by_day(dataset.groups, holdout_days=3)


def test_model_gradients_end_to_end() -> None:
    schema = TINY_SYNTH.schema
    groups = _train_groups()[:3]
    config = tiny_run_config(TINY_BACKBONES["dcnv2"])
    model = initial_model(config, groups, schema)
    rng = SplitMix64(4)
    for i, tensor in enumerate(model.params.values()):
        tensor.data = 0.3 * rng.fork(i).normal(tensor.size).reshape(tensor.shape)
    batches = GroupBatches(model, groups)
    check_gradients(lambda: batch_losses(model, batches, [0, 2])[0], list(model.params.values()))


def test_training_is_deterministic() -> None:
    groups = _train_groups()
    config = tiny_run_config()
    first = train(config, groups, TINY_SYNTH.schema)
    second = train(config, groups, TINY_SYNTH.schema)
    assert first.steps == 2 * math.ceil(len(groups) / config.batch_size)
    assert len(first.metrics) == first.steps
    assert first.checkpoint.digest() == second.checkpoint.digest()
    assert set(first.metrics[0]) == set(metrics_columns(first.model.tasks))
    other = train(config.replace(seed=1), groups, TINY_SYNTH.schema)
    assert other.checkpoint.digest() != first.checkpoint.digest()


def test_training_lowers_loss(tmp_path: Path) -> None:
    groups = _train_groups()
    config = tiny_run_config(epochs=6)
    config = config.replace(schedule=ScheduleConfig(lr_peak=0.02, lr_final=0.002))
    before = evaluate_loss(initial_model(config, groups, TINY_SYNTH.schema), groups)
    result = train(config, groups, TINY_SYNTH.schema, metrics_path=str(tmp_path / "metrics.csv"))
    assert evaluate_loss(result.model, groups) < before
    assert (tmp_path / "metrics.csv").read_text().splitlines()[0] == ",".join(metrics_columns(result.model.tasks))


def test_divergence_names_the_group() -> None:
    groups = _train_groups()
    config = tiny_run_config()
    model = initial_model(config, groups, TINY_SYNTH.schema)
    model.params["mmoe/head.purchase/bias"].data = np.array([np.nan])
    with pytest.raises(TrainingDivergedError, match="Loss `purchase` is not finite for query group"):
        train(config, groups, TINY_SYNTH.schema, init=model)


def test_warmstart_same_schema_copies_everything(tmp_path: Path) -> None:
    groups = _train_groups()
    config = tiny_run_config(epochs=1)
    base = train(config, groups, TINY_SYNTH.schema)
    path = str(tmp_path / "base.ckpt")
    save_checkpoint(base.checkpoint, path)
    resumed = train(config.replace(epochs=0, warmstart_from=path), groups, TINY_SYNTH.schema)
    for name, values in base.checkpoint.params.items():
        np.testing.assert_array_equal(resumed.model.params[name].data, values)
    assert resumed.model.stats == base.model.stats


def test_warmstart_new_feature() -> None:
    groups = _train_groups()
    config = tiny_run_config(epochs=1)
    old_schema = canonical_schema(TINY_SYNTH, with_discount=False)
    base = train(config, project(groups, old_schema), old_schema)
    new_schema = TINY_SYNTH.schema
    fresh_stats = fit_norm_stats((item for g in groups for item in g.items), new_schema)
    warm = warmstart_load(base.checkpoint, new_schema, config, fresh_stats)
    fresh = CvrModel.initialize(new_schema, config, fresh_stats)
    for name in warm.input_projection_names():
        np.testing.assert_array_equal(warm.params[name].data, fresh.params[name].data)
    for name in ("masknet/block0.0/U", "masknet/dnn/weight", "mmoe/head.purchase/weight", "embed/brand/table"):
        np.testing.assert_array_equal(warm.params[name].data, base.checkpoint.params[name])
    assert warm.stats.mean["rating"] == base.model.stats.mean["rating"]
    assert warm.stats.mean["discount"] == fresh_stats.mean["discount"]
    # the warm model keeps training
    assert train(config, groups, new_schema, init=warm).steps > 0


def test_warmstart_incompatible() -> None:
    groups = _train_groups()
    base = train(tiny_run_config(epochs=0), groups, TINY_SYNTH.schema)
    wider = tiny_run_config(MaskNetConfig(cross_width=4, deep_width=5, parallel_blocks=2, sequential_blocks=2))
    with pytest.raises(IncompatibleCheckpointError, match="is missing or has another shape"):
        warmstart_load(base.checkpoint, TINY_SYNTH.schema, wider)
    with pytest.raises(IncompatibleCheckpointError, match="parameters the new model lacks"):
        warmstart_load(base.checkpoint, TINY_SYNTH.schema, tiny_run_config(TINY_BACKBONES["dcnv2"]))


def test_throughput() -> None:
    groups = _train_groups()
    config = tiny_run_config()
    with pytest.raises(MeasurementError, match="Need more than 1 steps"):
        measure_throughput(config, groups, TINY_SYNTH.schema, steps=1)
    speed = measure_throughput(config, groups, TINY_SYNTH.schema, steps=5)
    assert speed.timed_steps == 4
    assert speed.groups_per_sec > 0
    assert speed.flops_per_sec > speed.groups_per_sec


def test_listwise_loss_matches_plain_softmax() -> None:
    rng = SplitMix64(21)
    for size in (2, 5, 9):
        logits = -20.0 + 40.0 * rng.fork(size).uniform(size)
        labels = np.zeros(size)
        labels[[0, size - 1]] = 1.0
        denom = sum(math.exp(val) for val in logits)
        expected = -sum(lab * math.log(math.exp(val) / denom) for val, lab in zip(logits, labels))
        assert listwise_loss(Tensor(logits), labels).item() == pytest.approx(expected, rel=1e-9, abs=1e-9)
        shifted = listwise_loss(Tensor(logits + 7.5), labels).item()
        assert shifted == pytest.approx(listwise_loss(Tensor(logits), labels).item(), rel=1e-12, abs=1e-12)
