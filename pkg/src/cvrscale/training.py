"""Listwise multi-task training, warmstart and training-throughput measurement.

The loss of one query group and task is the softmax cross-entropy ``-sum_i y_i * log softmax(s)_i`` over the
group's items; groups without a positive contribute zero. A batch is a fixed number of groups and its loss is
the mean of per-group losses, summed over tasks without weights.

"""

import logging
import math
import time
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, NoReturn, Optional, Sequence, Tuple

import numpy as np

from cvrscale.checkpoint import Checkpoint, checkpoint_from_model, load_checkpoint
from cvrscale.config import RunConfig
from cvrscale.errors import ContractError, IncompatibleCheckpointError, MeasurementError, TrainingDivergedError
from cvrscale.features import EncodedBatch, FeatureRecord, FeatureSchema, NormStats, fit_norm_stats
from cvrscale.flops import count_flops
from cvrscale.model import CvrModel
from cvrscale.numerics import Tensor, backward, custom_op
from cvrscale.optim import AdamState, LrSchedule, adam_step, lr_at
from cvrscale.utils import SplitMix64, write_csv

log = logging.getLogger(__name__)

#: generator stream used for the per-epoch group shuffle
SHUFFLE_STREAM = 0x5348
#: share of timed steps discarded as warm-up by :func:`measure_throughput`
THROUGHPUT_WARMUP = 0.1


@dataclass
class RankingGroup:
    """Items shown for one query with their binary labels per task."""

    query_id: int
    day: int
    items: List[FeatureRecord]
    labels: Dict[str, np.ndarray]
    utility: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        if not self.items:
            raise ContractError(f"Query group {self.query_id} has no items")
        self.labels = {task: np.asarray(vals, dtype=np.float64) for task, vals in self.labels.items()}
        for task, vals in self.labels.items():
            if vals.shape != (len(self.items),):
                raise ContractError(
                    f"Labels `{task}` of group {self.query_id} have shape {vals.shape}, expected ({len(self.items)},)"
                )

    @property
    def n_items(self) -> int:
        return len(self.items)

    def n_positives(self, task: str) -> int:
        return int(np.count_nonzero(self.labels[task]))


def _check_offsets(offsets: np.ndarray, n_items: int) -> np.ndarray:
    offsets = np.asarray(offsets, dtype=np.int64)
    if offsets.ndim != 1 or offsets.size < 2 or offsets[0] != 0 or offsets[-1] != n_items:
        raise ContractError(f"Group offsets must run from 0 to {n_items}, got {offsets.tolist()}")
    if np.any(np.diff(offsets) < 1):
        raise ContractError("Every group needs at least one item")
    return offsets


def batched_listwise_loss(logits: Tensor, offsets: np.ndarray, labels: np.ndarray) -> Tuple[Tensor, np.ndarray]:
    """Mean listwise loss over the groups of a ragged batch.

    Args:
        logits: scores of all items, shape ``(N,)``
        offsets: group boundaries, group ``g`` owns items ``offsets[g]:offsets[g + 1]``
        labels: binary targets, shape ``(N,)``

    Returns:
        scalar loss tensor and the per-group loss values

    """
    if logits.ndim != 1:
        raise ContractError(f"Listwise loss expects a vector of logits, got shape {logits.shape}")
    labels = np.asarray(labels, dtype=np.float64)
    if labels.shape != logits.shape:
        raise ContractError(f"Labels {labels.shape} do not match logits {logits.shape}")
    offsets = _check_offsets(offsets, logits.shape[0])
    starts = offsets[:-1]
    n_groups = starts.size
    group_of = np.repeat(np.arange(n_groups), np.diff(offsets))
    scores = logits.data
    # log-softmax with the group maximum subtracted
    seg_max = np.maximum.reduceat(scores, starts)
    exps = np.exp(scores - seg_max[group_of])
    seg_sum = np.add.reduceat(exps, starts)
    log_probs = scores - (np.log(seg_sum) + seg_max)[group_of]
    per_group = -np.add.reduceat(labels * log_probs, starts) + 0.0
    positives = np.add.reduceat(labels, starts)

    def _backward(g: np.ndarray) -> Sequence[np.ndarray]:
        probs = exps / seg_sum[group_of]
        return ((probs * positives[group_of] - labels) * (g / n_groups),)

    return custom_op(per_group.mean(), "listwise_loss", (logits,), _backward), per_group


def listwise_loss(logits_t: Tensor, labels_t: np.ndarray) -> Tensor:
    """Softmax cross-entropy of one group.

    Example:
        >>> round(listwise_loss(Tensor([0.0, 0.0]), [1, 0]).item(), 4)
        0.6931

    """
    loss, _ = batched_listwise_loss(logits_t, np.array([0, logits_t.shape[0]]), labels_t)
    return loss


def total_loss(per_task: Mapping[str, Tensor]) -> Tensor:
    """Unweighted sum over tasks, accumulated in task-name order."""
    if not per_task:
        raise ContractError("Total loss needs at least one task")
    names = sorted(per_task)
    total = per_task[names[0]]
    for name in names[1:]:
        total = total + per_task[name]
    return total


def split_by_day(
    groups: Sequence[RankingGroup], holdout_days: int = 1
) -> Tuple[List[RankingGroup], List[RankingGroup]]:
    """Train on older days, evaluate on the most recent ``holdout_days``."""
    days = sorted({group.day for group in groups})
    if not 1 <= holdout_days < len(days):
        raise ContractError(f"Cannot hold out {holdout_days} of {len(days)} days")
    cutoff = days[-holdout_days]
    return [g for g in groups if g.day < cutoff], [g for g in groups if g.day >= cutoff]


def check_groups(groups: Sequence[RankingGroup], tasks: Sequence[str]) -> None:
    """Every group carries all task labels and at least one primary positive."""
    if not groups:
        raise ContractError("Training needs at least one query group")
    for group in groups:
        missing = [task for task in tasks if task not in group.labels]
        if missing:
            raise ContractError(f"Group {group.query_id} lacks labels for {missing}")
        if group.n_positives(tasks[0]) < 1:
            raise ContractError(f"Group {group.query_id} has no `{tasks[0]}` positive")


class GroupBatches:
    """Encodes every item once and slices batches of whole groups out of it."""

    def __init__(self, model: CvrModel, groups: Sequence[RankingGroup]) -> None:
        self.groups = list(groups)
        self.tasks = list(model.tasks)
        sizes = np.array([g.n_items for g in self.groups], dtype=np.int64)
        self.offsets = np.concatenate([[0], np.cumsum(sizes)])
        self.encoded = model.encode([item for g in self.groups for item in g.items])
        self.labels = {task: np.concatenate([g.labels[task] for g in self.groups]) for task in self.tasks}

    def __len__(self) -> int:
        return len(self.groups)

    def batch(self, group_ids: Sequence[int]) -> Tuple[EncodedBatch, np.ndarray, Dict[str, np.ndarray]]:
        """Encoded items, group offsets and labels of the given groups, in that order."""
        items = np.concatenate([np.arange(self.offsets[g], self.offsets[g + 1]) for g in group_ids])
        sizes = np.diff(self.offsets)[np.asarray(group_ids)]
        offsets = np.concatenate([[0], np.cumsum(sizes)])
        labels = {task: vals[items] for task, vals in self.labels.items()}
        return self.encoded.take_items(items), offsets, labels


def batch_losses(
    model: CvrModel, batches: GroupBatches, group_ids: Sequence[int]
) -> Tuple[Tensor, Dict[str, Tensor], Dict[str, np.ndarray]]:
    """Total loss, per-task losses and per-group values for one batch of groups."""
    encoded, offsets, labels = batches.batch(group_ids)
    logits = model.forward(encoded)
    per_task, per_group = {}, {}
    for task in batches.tasks:
        per_task[task], per_group[task] = batched_listwise_loss(logits[task], offsets, labels[task])
    return total_loss(per_task), per_task, per_group


def _raise_diverged(batches: GroupBatches, group_ids: Sequence[int], per_group: Mapping[str, np.ndarray]) -> NoReturn:
    for task, values in per_group.items():
        bad = np.flatnonzero(~np.isfinite(values))
        if bad.size:
            group = batches.groups[group_ids[bad[0]]]
            raise TrainingDivergedError(f"Loss `{task}` is not finite for query group {group.query_id}")
    raise TrainingDivergedError("Total loss is not finite")


def train_step(
    model: CvrModel, batches: GroupBatches, group_ids: Sequence[int], state: AdamState, lr: float
) -> Dict[str, float]:
    """Forward, backward and one Adam update; returns the batch losses."""
    loss, per_task, per_group = batch_losses(model, batches, group_ids)
    if not math.isfinite(loss.item()):
        _raise_diverged(batches, group_ids, per_group)
    model.zero_grad()
    backward(loss)
    grads = {
        name: (tensor.grad if tensor.grad is not None else np.zeros_like(tensor.data))
        for name, tensor in model.params.items()
    }
    adam_step(model.params, grads, state, lr)
    model.zero_grad()
    losses = {f"loss_{task}": value.item() for task, value in per_task.items()}
    losses["loss_total"] = loss.item()
    return losses


def evaluate_loss(model: CvrModel, groups: Sequence[RankingGroup], batch_size: int = 64) -> float:
    """Mean total loss per group, without updating anything."""
    batches = GroupBatches(model, groups)
    total = 0.0
    for lo in range(0, len(batches), batch_size):
        ids = list(range(lo, min(lo + batch_size, len(batches))))
        loss, _, _ = batch_losses(model, batches, ids)
        total += loss.item() * len(ids)
    return total / len(batches)


@dataclass
class TrainResult:
    """Trained model, its checkpoint and the interval metrics."""

    model: CvrModel
    checkpoint: Checkpoint
    metrics: List[Dict[str, float]] = field(default_factory=list)
    steps: int = 0
    wall_seconds: float = 0.0
    skipped_groups: Dict[str, int] = field(default_factory=dict)


def metrics_columns(tasks: Sequence[str]) -> List[str]:
    return ["step", "lr", "loss_total"] + [f"loss_{task}" for task in tasks] + ["groups_per_sec"]


def make_schedule(config: RunConfig, total_steps: int) -> LrSchedule:
    sched = config.schedule
    warmup = min(total_steps, int(round(sched.warmup_fraction * total_steps)))
    return LrSchedule(warmup_steps=warmup, total_steps=total_steps, lr_peak=sched.lr_peak, lr_final=sched.lr_final)


def make_adam(config: RunConfig) -> AdamState:
    sched = config.schedule
    return AdamState(beta1=sched.beta1, beta2=sched.beta2, eps=sched.eps, lr_peak=sched.lr_peak)


def initial_model(config: RunConfig, groups: Sequence[RankingGroup], schema: FeatureSchema) -> CvrModel:
    """Fresh model, or a warmstarted one when the config names a source checkpoint."""
    fresh_stats = fit_norm_stats((item for g in groups for item in g.items), schema)
    if config.warmstart_from:
        return warmstart_load(load_checkpoint(config.warmstart_from), schema, config, fresh_stats)
    return CvrModel.initialize(schema, config, fresh_stats)


def train(
    config: RunConfig,
    groups: Sequence[RankingGroup],
    schema: FeatureSchema,
    init: Optional[CvrModel] = None,
    metrics_path: Optional[str] = None,
) -> TrainResult:
    """Run ``epochs * ceil(groups / batch_size)`` Adam steps over shuffled batches of groups.

    Args:
        config: run configuration
        groups: training query groups
        schema: feature layout
        init: model to continue from instead of a fresh or warmstarted one
        metrics_path: optional CSV destination of the interval metrics

    Returns:
        trained model, final checkpoint and metrics rows

    Raises:
        TrainingDivergedError: if a batch loss stops being finite

    """
    groups = list(groups)
    check_groups(groups, config.mmoe.tasks)
    model = init if init is not None else initial_model(config, groups, schema)
    steps_per_epoch = math.ceil(len(groups) / config.batch_size)
    total_steps = config.epochs * steps_per_epoch
    schedule = make_schedule(config, total_steps)
    state = make_adam(config)
    skipped = {task: sum(g.n_positives(task) == 0 for g in groups) * config.epochs for task in model.tasks}
    metrics: List[Dict[str, float]] = []
    started = time.perf_counter()
    if total_steps:
        batches = GroupBatches(model, groups)
        rng = SplitMix64(config.seed).fork(SHUFFLE_STREAM)
        step = 0
        interval: Dict[str, float] = {}
        interval_steps, interval_groups, interval_start = 0, 0, time.perf_counter()
        for epoch in range(config.epochs):
            order = rng.fork(epoch).permutation(len(groups))
            for lo in range(0, len(groups), config.batch_size):
                ids = order[lo : lo + config.batch_size].tolist()
                step += 1
                lr = lr_at(schedule, step)
                for key, val in train_step(model, batches, ids, state, lr).items():
                    interval[key] = interval.get(key, 0.0) + val
                interval_steps += 1
                interval_groups += len(ids)
                if step % config.log_every and step != total_steps:
                    continue
                elapsed = max(time.perf_counter() - interval_start, 1e-12)
                row = {key: val / interval_steps for key, val in interval.items()}
                row.update(step=step, lr=lr, groups_per_sec=interval_groups / elapsed)
                metrics.append(row)
                log.info(
                    f"step {step}/{total_steps} lr={lr:.3g} loss={row['loss_total']:.5f}"
                    f" groups/s={row['groups_per_sec']:.1f}"
                )
                interval, interval_steps, interval_groups = {}, 0, 0
                interval_start = time.perf_counter()
    wall = time.perf_counter() - started
    if any(skipped.values()):
        log.info(f"Groups without positives contributed zero loss: {skipped}")
    ckpt = checkpoint_from_model(model, {"steps": total_steps, "seed": config.seed})
    if metrics_path:
        write_csv(metrics_path, metrics_columns(model.tasks), metrics)
    return TrainResult(model, ckpt, metrics, total_steps, wall, skipped)


def warmstart_load(
    source: Checkpoint, new_schema: FeatureSchema, new_config: RunConfig, fresh_stats: Optional[NormStats] = None
) -> CvrModel:
    """Initialize a model for ``new_schema`` from ``source``.

    With the same schema fingerprint every parameter is copied. Otherwise everything except the input projection
    is copied; embedding tables of features the source does not know (or knows with another shape) start fresh.

    Raises:
        IncompatibleCheckpointError: if any parameter past the input projection differs in shape or is missing

    """
    stats = fresh_stats if fresh_stats is not None else source.stats
    fresh = CvrModel.initialize(new_schema, new_config, stats)
    same_schema = new_schema.fingerprint == source.fingerprint
    projection = set(fresh.input_projection_names())
    tables = {name for name in fresh.params if name.startswith("embed/")}
    extra = sorted(name for name in source.params if name not in fresh.params and not name.startswith("embed/"))
    if extra:
        raise IncompatibleCheckpointError(f"Checkpoint has parameters the new model lacks: {extra}")
    reinit: List[str] = []
    params: "OrderedDict[str, Tensor]" = OrderedDict()
    for name, tensor in fresh.params.items():
        src = source.params.get(name)
        fits = src is not None and src.shape == tensor.shape
        if same_schema and not fits:
            raise IncompatibleCheckpointError(f"Checkpoint parameter `{name}` is missing or has another shape")
        if not same_schema and name in projection:
            reinit.append(name)
            params[name] = tensor
            continue
        if not fits:
            if name not in tables:
                shape = None if src is None else src.shape
                raise IncompatibleCheckpointError(
                    f"Cannot warmstart `{name}`: checkpoint has {shape}, need {tensor.shape}"
                )
            reinit.append(name)
            params[name] = tensor
            continue
        params[name] = Tensor(src.copy(), requires_grad=True, name=name)
    if same_schema:
        merged = source.stats
    else:
        kept = [spec.name for spec in new_schema.specs if spec.kind == "numerical" and spec.name in source.stats]
        merged = source.stats.merged(stats, kept)
    log.info(f"Warmstart copied {len(params) - len(reinit)} parameters, re-initialized {sorted(reinit)}")
    return CvrModel(new_schema, new_config, params, merged)


@dataclass
class Throughput:
    """Training speed over the timed (post warm-up) steps."""

    groups_per_sec: float
    flops_per_sec: float
    timed_steps: int


def measure_throughput(
    config: RunConfig, groups: Sequence[RankingGroup], schema: FeatureSchema, steps: int
) -> Throughput:
    """Time ``steps`` training steps, discarding the first tenth (at least one) as warm-up.

    FLOPs per second are backbone inference FLOPs per item times items per second.
    """
    warmup = math.ceil(THROUGHPUT_WARMUP * steps)
    if steps < 1 or steps <= warmup:
        raise MeasurementError(f"Need more than {max(warmup, 1)} steps to measure throughput, got {steps}")
    groups = list(groups)
    check_groups(groups, config.mmoe.tasks)
    model = initial_model(config, groups, schema)
    batches = GroupBatches(model, groups)
    schedule = make_schedule(config, steps)
    state = make_adam(config)
    order = SplitMix64(config.seed).fork(SHUFFLE_STREAM).permutation(len(groups))
    timed, n_groups, n_items = 0.0, 0, 0
    for step in range(1, steps + 1):
        lo = ((step - 1) * config.batch_size) % len(groups)
        ids = [int(order[(lo + i) % len(groups)]) for i in range(min(config.batch_size, len(groups)))]
        tic = time.perf_counter()
        train_step(model, batches, ids, state, lr_at(schedule, step))
        if step > warmup:
            timed += time.perf_counter() - tic
            n_groups += len(ids)
            n_items += sum(groups[i].n_items for i in ids)
    timed = max(timed, 1e-12)
    groups_per_sec = n_groups / timed
    avg_group = n_items / n_groups
    flops = count_flops(config.backbone, schema.input_dim)
    return Throughput(groups_per_sec, flops * groups_per_sec * avg_group, steps - warmup)
