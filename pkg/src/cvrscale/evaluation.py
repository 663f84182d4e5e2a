"""Ranking quality and permutation feature importance.

Items are ranked by descending score; equal scores keep their original item order, so every metric here is
deterministic.

"""

import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from cvrscale.errors import ContractError, SchemaError, UndefinedMetricError
from cvrscale.features import EncodedBatch
from cvrscale.model import CvrModel
from cvrscale.training import RankingGroup
from cvrscale.utils import SplitMix64, read_csv, write_csv

log = logging.getLogger(__name__)

#: permutation of ``n`` items for repeat ``r`` and feature ``k``; the default draws uniformly
ShuffleFn = Callable[[int, int, int], np.ndarray]


@dataclass
class ScoredGroup:
    """Scores and purchase labels of one query's items."""

    query_id: int
    scores: np.ndarray
    labels: np.ndarray

    @property
    def n_positives(self) -> int:
        return int(np.count_nonzero(self.labels))


def ranking(scores: np.ndarray) -> np.ndarray:
    """Item positions sorted by descending score, ties by ascending position.

    Example:
        >>> ranking(np.array([0.5, 0.9, 0.5])).tolist()
        [1, 0, 2]

    """
    return np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")


def average_precision(group: ScoredGroup) -> float:
    """Mean of precision@k over the ranks ``k`` holding a positive.

    Example:
        >>> group = ScoredGroup(0, np.array([4.0, 3.0, 2.0, 1.0]), np.array([1, 0, 1, 0]))
        >>> round(average_precision(group), 12)
        0.833333333333

    """
    n_pos = group.n_positives
    if n_pos == 0:
        raise UndefinedMetricError(f"Average precision of group {group.query_id} is undefined without positives")
    hits = np.asarray(group.labels)[ranking(group.scores)] > 0
    total, seen = 0.0, 0
    for rank, hit in enumerate(hits, start=1):
        if hit:
            seen += 1
            total += seen / rank
    return total / n_pos


def eligible(groups: Sequence[ScoredGroup]) -> Tuple[List[ScoredGroup], int]:
    """Groups with at least one positive, and the count of excluded ones."""
    kept = [g for g in groups if g.n_positives > 0]
    return kept, len(groups) - len(kept)


def mean_ap(groups: Sequence[ScoredGroup]) -> float:
    """Arithmetic mean of AP over groups with positives, accumulated in group order."""
    kept, excluded = eligible(groups)
    if not kept:
        raise UndefinedMetricError(f"mAP is undefined, none of {len(groups)} groups has a positive")
    if excluded:
        log.debug(f"mAP excludes {excluded} groups without positives")
    total = 0.0
    for group in kept:
        total += average_precision(group)
    return total / len(kept)


def mean_reciprocal_rank(groups: Sequence[ScoredGroup]) -> float:
    """MRR over single-positive groups, the cross-check of mAP."""
    single = [g for g in groups if g.n_positives == 1]
    if not single:
        raise UndefinedMetricError("MRR is undefined, no group has exactly one positive")
    total = 0.0
    for group in single:
        hits = np.asarray(group.labels)[ranking(group.scores)] > 0
        total += 1.0 / (int(np.argmax(hits)) + 1)
    return total / len(single)


def score_groups(
    model: CvrModel,
    groups: Sequence[RankingGroup],
    encoded: Optional[EncodedBatch] = None,
    task: Optional[str] = None,
) -> List[ScoredGroup]:
    """Score all items in one pass and split them back into groups."""
    if encoded is None:
        encoded = model.encode([item for g in groups for item in g.items])
    scores = model.score_encoded(encoded)
    task = task or model.primary_task
    scored, lo = [], 0
    for group in groups:
        hi = lo + group.n_items
        scored.append(ScoredGroup(group.query_id, scores[lo:hi], group.labels[task]))
        lo = hi
    return scored


@dataclass
class EvalSummary:
    """Headline metrics of one evaluation set."""

    map: float
    mrr: Optional[float]
    n_groups: int
    n_excluded: int

    def as_rows(self) -> List[Dict[str, object]]:
        return [
            {"metric": "map", "value": self.map},
            {"metric": "mrr", "value": self.mrr},
            {"metric": "n_groups", "value": self.n_groups},
            {"metric": "n_excluded", "value": self.n_excluded},
        ]


def summarize(scored: Sequence[ScoredGroup]) -> EvalSummary:
    kept, excluded = eligible(scored)
    try:
        mrr: Optional[float] = mean_reciprocal_rank(kept)
    except UndefinedMetricError:
        mrr = None
    return EvalSummary(mean_ap(kept), mrr, len(kept), excluded)


def evaluate(model: CvrModel, groups: Sequence[RankingGroup]) -> EvalSummary:
    return summarize(score_groups(model, groups))


@dataclass
class ImportanceResult:
    """mAP drops over shuffle repeats of one feature or feature pair."""

    features: Tuple[str, ...]
    baseline: float
    drops: np.ndarray

    @property
    def mean(self) -> float:
        return float(self.drops.mean())

    @property
    def std(self) -> float:
        return float(self.drops.std(ddof=1)) if self.drops.size > 1 else 0.0

    @property
    def stderr(self) -> float:
        return self.std / np.sqrt(self.drops.size)


def _uniform_shuffle(seed: int) -> ShuffleFn:
    root = SplitMix64(seed)

    def _shuffle(n_items: int, repeat: int, feature: int) -> np.ndarray:
        return root.fork(repeat).fork(feature).permutation(n_items)

    return _shuffle


def perm_importance(
    model: CvrModel,
    groups: Sequence[RankingGroup],
    features: Union[str, Sequence[str]],
    n_repeats: int = 5,
    seed: int = 0,
    shuffle: Optional[ShuffleFn] = None,
) -> ImportanceResult:
    """Mean mAP drop when the features' raw values are shuffled across all evaluation items.

    Args:
        model: trained model
        groups: evaluation groups
        features: one feature name, or several shuffled with independent permutations
        n_repeats: shuffle repeats
        seed: seed of the default shuffle
        shuffle: custom permutation source ``(n_items, repeat, feature_index) -> perm``

    Raises:
        SchemaError: if a feature is not in the model schema

    """
    names = (features,) if isinstance(features, str) else tuple(features)
    if n_repeats < 1 or not names:
        raise ContractError(f"Need n_repeats >= 1 and at least one feature, got {n_repeats} / {names}")
    unknown = [name for name in names if name not in model.schema]
    if unknown:
        raise SchemaError(f"Cannot shuffle features unknown to the schema: {unknown}")
    shuffle = shuffle or _uniform_shuffle(seed)
    encoded = model.encode([item for g in groups for item in g.items])
    baseline = mean_ap(score_groups(model, groups, encoded))
    drops = np.zeros(n_repeats)
    for repeat in range(n_repeats):
        shuffled = encoded
        for k, name in enumerate(names):
            shuffled = shuffled.permute_feature(name, shuffle(encoded.n_items, repeat, k))
        drops[repeat] = baseline - mean_ap(score_groups(model, groups, shuffled))
    log.info(f"Importance of {names}: mean mAP drop {drops.mean():.5f} over {n_repeats} repeats")
    return ImportanceResult(names, baseline, drops)


def normalize_importance(drops: Mapping[str, float]) -> Tuple[Dict[str, float], bool]:
    """Percent share of each category's (non-negative) drop; uniform shares and ``True`` if all drops are zero.

    Example:
        >>> normalize_importance({"query-item": 1.0, "item-item": 3.0})
        ({'query-item': 25.0, 'item-item': 75.0}, False)

    """
    if not drops:
        raise ContractError("Importance normalization needs at least one category")
    clamped = {name: max(float(val), 0.0) for name, val in drops.items()}
    total = sum(clamped.values())
    if total <= 0.0:
        return {name: 100.0 / len(clamped) for name in clamped}, True
    return {name: 100.0 * val / total for name, val in clamped.items()}, False


def write_importance_csv(path: str, shares: Mapping[str, float], config_digest: Optional[str] = None) -> None:
    rows = [{"category": name, "percentage": val} for name, val in shares.items()]
    write_csv(path, ["category", "percentage"], rows, config_digest)


def read_importance_csv(path: str) -> Dict[str, float]:
    _, rows = read_csv(path)
    return {row["category"]: float(row["percentage"]) for row in rows}


def write_eval_csv(path: str, summary: EvalSummary, config_digest: Optional[str] = None) -> None:
    write_csv(path, ["metric", "value"], summary.as_rows(), config_digest)
