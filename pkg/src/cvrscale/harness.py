"""Scaling experiments: factor grids, data-window sweeps, additivity, warmstart comparison and importance reports.

Every report is a list of rows written by :func:`cvrscale.utils.write_csv` under the digest of the experiment that
produced it. Throughput columns are wall-clock measurements; a grid run with ``throughput_steps=0`` leaves them empty
and its report is byte-stable.

"""

import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from cvrscale.checkpoint import load_checkpoint, save_checkpoint
from cvrscale.config import RunConfig, with_factor
from cvrscale.errors import ConfigError, ContractError, CvrScaleError
from cvrscale.evaluation import evaluate, normalize_importance, perm_importance
from cvrscale.features import FeatureSchema, fit_norm_stats
from cvrscale.flops import count_flops
from cvrscale.model import CvrModel
from cvrscale.synth import SynthDataset, canonical_schema, project
from cvrscale.training import RankingGroup, measure_throughput, split_by_day, train, warmstart_load
from cvrscale.utils import digest_bytes, digest_obj

log = logging.getLogger(__name__)

#: grid axes scaling every embedded feature instead of the backbone
EMBEDDING_AXES = ("embed_dim", "vocab_mult")
GRID_COLUMNS = (
    "factor",
    "value",
    "map_mean",
    "map_std",
    "delta_map_pct",
    "groups_per_sec",
    "delta_throughput_pct",
    "inference_flops",
    "status",
)
SWEEP_COLUMNS = ("days", "n_train_groups", "map_mean", "map_std", "fit_slope", "fit_r2")
ADDITIVITY_COLUMNS = ("run", "map", "gain", "gain_pct")
ADDITIVITY_RUNS = ("data", "backbone", "embedding", "combined")
#: sequential feature standing for the customer embedding in second-order importance
CUSTOMER_FEATURE = "history"
#: feature categories of the generated schema for category importance reports
FEATURE_CATEGORIES: Dict[str, Tuple[str, ...]] = {
    "engagement": ("rating", "price", "discount"),
    "item_query_understanding": ("brand", "title"),
}
WARMSTART_COLUMNS = ("run", "epochs", "map", "wall_seconds")


@dataclass(frozen=True)
class GridSpec:
    """One scaling axis swept around a base run.

    Args:
        base: base run configuration
        factor: backbone scaling factor or one of ``EMBEDDING_AXES``
        values: factor values, one grid cell each
        seeds: replicate seeds per cell
        base_value: value whose cell the deltas refer to; the base config's own value by default
        throughput_steps: training steps timed per cell, 0 to skip timing
        workers: cells run in that many independent processes

    """

    base: RunConfig
    factor: str
    values: Tuple[int, ...]
    seeds: Tuple[int, ...] = (0, 1, 2)
    base_value: Optional[int] = None
    throughput_steps: int = 20
    workers: int = 1

    def __post_init__(self) -> None:
        if not self.values or not self.seeds:
            raise ConfigError("A grid needs at least one value and one seed")
        if self.factor not in EMBEDDING_AXES and self.factor not in self.base.backbone.scaling_factors:
            raise ConfigError(
                f"`{self.factor}` is not a scaling factor of `{self.base.backbone.family}`:"
                f" {self.base.backbone.scaling_factors + EMBEDDING_AXES}"
            )
        if self.reference not in self.values:
            raise ConfigError(f"Base value {self.reference} is not among the grid values {self.values}")
        if self.throughput_steps < 0 or self.workers < 1:
            raise ConfigError(
                f"Need throughput_steps >= 0 and workers >= 1, got {self.throughput_steps} / {self.workers}"
            )

    @property
    def reference(self) -> int:
        if self.base_value is not None:
            return self.base_value
        if self.factor in EMBEDDING_AXES:
            return self.values[0]
        own = getattr(self.base.backbone, self.factor)
        return own if own in self.values else self.values[0]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "base": self.base.to_dict(),
            "factor": self.factor,
            "values": list(self.values),
            "seeds": list(self.seeds),
            "base_value": self.reference,
            "throughput_steps": self.throughput_steps,
        }

    def digest(self, dataset_digest: str = "") -> str:
        return digest_obj({"grid": self.to_dict(), "dataset": dataset_digest})


def cell_setup(base: RunConfig, schema: FeatureSchema, factor: str, value: int) -> Tuple[RunConfig, FeatureSchema]:
    """Config and schema of one grid cell."""
    if factor == "embed_dim":
        return base, schema.scaled(embed_dim=value)
    if factor == "vocab_mult":
        return base, schema.scaled(vocab_mult=value)
    return base.replace(backbone=with_factor(base.backbone, factor, value)), schema


@dataclass
class CellResult:
    """Replicate mAPs of one cell with its cost columns."""

    value: int
    maps: List[float] = field(default_factory=list)
    groups_per_sec: Optional[float] = None
    flops: Optional[int] = None
    error: Optional[str] = None

    @property
    def map_mean(self) -> Optional[float]:
        return float(np.mean(self.maps)) if self.maps else None

    @property
    def map_std(self) -> Optional[float]:
        return float(np.std(self.maps, ddof=1)) if len(self.maps) > 1 else 0.0 if self.maps else None


def replicate_maps(
    config: RunConfig,
    train_groups: Sequence[RankingGroup],
    schema: FeatureSchema,
    eval_groups: Sequence[RankingGroup],
    seeds: Sequence[int],
) -> List[float]:
    """Held-out mAP of one training run per seed."""
    return [evaluate(train(config.replace(seed=seed), train_groups, schema).model, eval_groups).map for seed in seeds]


def run_cell(
    base: RunConfig,
    schema: FeatureSchema,
    factor: str,
    value: int,
    seeds: Sequence[int],
    train_groups: Sequence[RankingGroup],
    eval_groups: Sequence[RankingGroup],
    throughput_steps: int = 0,
) -> CellResult:
    """Train and evaluate one cell per seed; failures are caught into ``error``."""
    result = CellResult(value)
    try:
        config, cell_schema = cell_setup(base, schema, factor, value)
        result.flops = count_flops(config.backbone, cell_schema.input_dim)
        result.maps = replicate_maps(config, train_groups, cell_schema, eval_groups, seeds)
        if throughput_steps:
            speed = measure_throughput(config, train_groups, cell_schema, throughput_steps)
            result.groups_per_sec = speed.groups_per_sec
    except CvrScaleError as ex:
        log.warning(f"Grid cell {factor}={value} failed: {ex}")
        result.error = f"{type(ex).__name__}: {ex}"
    return result


def _pct(value: Optional[float], base: Optional[float]) -> Optional[float]:
    if value is None or base is None or base == 0:
        return None
    return (value - base) / base * 100.0


def run_grid(grid: GridSpec, dataset: SynthDataset) -> List[Dict[str, Any]]:
    """Train every cell of the grid; rows follow ``grid.values`` and a failed cell does not stop the grid.

    The last day of ``dataset`` is held out for evaluation.
    """
    train_groups, eval_groups = split_by_day(dataset.groups)
    jobs = [
        (grid.base, dataset.schema, grid.factor, value, grid.seeds, train_groups, eval_groups, grid.throughput_steps)
        for value in grid.values
    ]
    log.info(f"Grid over `{grid.factor}` = {list(grid.values)} with seeds {list(grid.seeds)}")
    if grid.workers > 1:
        with ProcessPoolExecutor(max_workers=grid.workers) as pool:
            cells = list(pool.map(run_cell, *zip(*jobs)))
    else:
        cells = [run_cell(*job) for job in jobs]
    base = next(cell for cell in cells if cell.value == grid.reference)
    rows = []
    for cell in cells:
        rows.append(
            {
                "factor": grid.factor,
                "value": cell.value,
                "map_mean": cell.map_mean,
                "map_std": cell.map_std,
                "delta_map_pct": _pct(cell.map_mean, base.map_mean),
                "groups_per_sec": cell.groups_per_sec,
                "delta_throughput_pct": _pct(cell.groups_per_sec, base.groups_per_sec),
                "inference_flops": cell.flops,
                "status": cell.error or "ok",
            }
        )
    return rows


@dataclass(frozen=True)
class LogLinearFit:
    """``map = slope * ln(days) + intercept``."""

    slope: float
    intercept: float
    r2: float


def fit_loglinear(points: Sequence[Tuple[float, float]]) -> LogLinearFit:
    """Least-squares fit of mAP against the log of the data window.

    Example:
        >>> fit = fit_loglinear([(2, 0.5), (4, 0.5), (8, 0.5)])
        >>> abs(fit.slope) < 1e-12, fit.r2
        (True, 1.0)

    """
    if len(points) < 3:
        raise ContractError(f"Need at least 3 points for a log-linear fit, got {len(points)}")
    days = np.array([float(day) for day, _ in points])
    if len(set(days.tolist())) != len(days) or np.any(days <= 0):
        raise ContractError(f"Data windows must be distinct and positive, got {days.tolist()}")
    values = np.array([float(val) for _, val in points])
    design = np.stack([np.log(days), np.ones_like(days)], axis=1)
    (slope, intercept), *_ = np.linalg.lstsq(design, values, rcond=None)
    residual = float(np.sum((values - design @ np.array([slope, intercept])) ** 2))
    total = float(np.sum((values - values.mean()) ** 2))
    # a constant series is fitted exactly
    r2 = 1.0 - residual / total if total > 0 else 1.0
    return LogLinearFit(float(slope), float(intercept), r2)


def data_sweep(
    base: RunConfig, dataset: SynthDataset, windows: Sequence[int], seeds: Sequence[int] = (0, 1, 2)
) -> Tuple[List[Dict[str, Any]], LogLinearFit]:
    """Train on the most recent ``n`` days before a fixed held-out last day, for each window ``n``."""
    train_groups, eval_groups = split_by_day(dataset.groups)
    train_days = sorted({g.day for g in train_groups})
    if not windows or max(windows) > len(train_days):
        raise ContractError(f"Windows {list(windows)} need at most {len(train_days)} training days")
    rows = []
    for days in sorted(windows):
        keep = set(train_days[-days:])
        subset = [g for g in train_groups if g.day in keep]
        maps = replicate_maps(base, subset, dataset.schema, eval_groups, seeds)
        row = {
            "days": days,
            "n_train_groups": len(subset),
            "map_mean": float(np.mean(maps)),
            "map_std": float(np.std(maps, ddof=1)) if len(maps) > 1 else 0.0,
        }
        log.info(f"data window {days}d: mAP {row['map_mean']:.4f} +- {row['map_std']:.4f}")
        rows.append(row)
    fit = fit_loglinear([(row["days"], row["map_mean"]) for row in rows])
    for row in rows:
        row.update(fit_slope=fit.slope, fit_r2=fit.r2)
    return rows, fit


@dataclass(frozen=True)
class AdditivityRun:
    """mAP of one run and the digest of the base configuration it scales."""

    map: float
    base_digest: str


def additivity_report(base: AdditivityRun, runs: Mapping[str, AdditivityRun]) -> List[Dict[str, Any]]:
    """Per-dimension gains over the base, the combined gain and the additivity residual.

    Example:
        >>> base = AdditivityRun(0.5, "b")
        >>> runs = {"data": AdditivityRun(0.51, "b"), "backbone": AdditivityRun(0.52, "b"),
        ...         "embedding": AdditivityRun(0.53, "b"), "combined": AdditivityRun(0.56, "b")}
        >>> abs(additivity_report(base, runs)[-1]["gain"]) < 1e-12
        True

    """
    missing = sorted(set(ADDITIVITY_RUNS) - set(runs))
    if missing:
        raise ContractError(f"Additivity report lacks runs {missing}")
    mismatched = sorted(name for name in ADDITIVITY_RUNS if runs[name].base_digest != base.base_digest)
    if mismatched:
        raise ContractError(f"Runs {mismatched} scale another base than {base.base_digest[:12]}")
    rows: List[Dict[str, Any]] = [{"run": "base", "map": base.map, "gain": 0.0, "gain_pct": 0.0}]
    gains = {}
    for name in ADDITIVITY_RUNS:
        gains[name] = runs[name].map - base.map
        gain_pct = _pct(runs[name].map, base.map)
        rows.append({"run": name, "map": runs[name].map, "gain": gains[name], "gain_pct": gain_pct})
    individual = sum(gains[name] for name in ADDITIVITY_RUNS if name != "combined")
    rows.append({"run": "sum_individual", "map": None, "gain": individual, "gain_pct": None})
    rows.append({"run": "residual", "map": None, "gain": gains["combined"] - individual, "gain_pct": None})
    return rows


@dataclass(frozen=True)
class AdditivitySpec:
    """How each dimension is scaled up from the base run."""

    base_days: int = 4
    factor: str = "cross_width"
    factor_value: int = 128
    embed_dim: int = 8
    seeds: Tuple[int, ...] = (0, 1, 2)


def run_additivity(base: RunConfig, dataset: SynthDataset, spec: AdditivitySpec) -> List[Dict[str, Any]]:
    """Base run on a short window, then data, backbone and embedding scaled alone and together."""
    train_groups, eval_groups = split_by_day(dataset.groups)
    train_days = sorted({g.day for g in train_groups})
    if not 1 <= spec.base_days < len(train_days):
        raise ContractError(f"Base window of {spec.base_days} days must be shorter than {len(train_days)} days")
    short = [g for g in train_groups if g.day in set(train_days[-spec.base_days :])]
    scaled_backbone = base.replace(backbone=with_factor(base.backbone, spec.factor, spec.factor_value))
    scaled_schema = dataset.schema.scaled(embed_dim=spec.embed_dim)
    plan = {
        "base": (base, dataset.schema, short),
        "data": (base, dataset.schema, train_groups),
        "backbone": (scaled_backbone, dataset.schema, short),
        "embedding": (base, scaled_schema, short),
        "combined": (scaled_backbone, scaled_schema, train_groups),
    }
    digest = base.digest()
    outcomes = {}
    for name, (config, schema, groups) in plan.items():
        maps = replicate_maps(config, groups, schema, eval_groups, spec.seeds)
        outcomes[name] = AdditivityRun(float(np.mean(maps)), digest)
        log.info(f"additivity run `{name}`: mAP {outcomes[name].map:.4f}")
    return additivity_report(outcomes.pop("base"), outcomes)


def file_digest(path: str) -> str:
    with open(path, "rb") as fopen:
        return digest_bytes(fopen.read())


def warmstart_compare(
    config: RunConfig,
    dataset: SynthDataset,
    base_path: str,
    finetune_epochs: int = 2,
    rebase: bool = False,
) -> List[Dict[str, Any]]:
    """From-scratch training on the full schema against a warmstart from a base model lacking one feature.

    The base model is trained on the schema without ``discount`` and saved to ``base_path`` unless a checkpoint is
    already there and ``rebase`` is off. Reading the base never modifies it.
    """
    train_groups, eval_groups = split_by_day(dataset.groups)
    spec = dataset.spec
    old_schema = canonical_schema(spec, with_discount=False) if spec is not None else dataset.schema.without("discount")
    if rebase or not os.path.isfile(base_path):
        log.info(f"Training the base model on {len(old_schema.specs)} features into {base_path}")
        base_run = train(config, project(train_groups, old_schema), old_schema)
        save_checkpoint(base_run.checkpoint, base_path)
    before = file_digest(base_path)
    source = load_checkpoint(base_path)

    scratch = train(config, train_groups, dataset.schema)
    fresh_stats = fit_norm_stats((item for g in train_groups for item in g.items), dataset.schema)
    finetune_config = config.replace(epochs=finetune_epochs)
    init = warmstart_load(source, dataset.schema, finetune_config, fresh_stats)
    warm = train(finetune_config, train_groups, dataset.schema, init=init)

    if file_digest(base_path) != before:
        raise ContractError(f"Base checkpoint {base_path} changed while being read")
    rows = [
        {
            "run": name,
            "epochs": run_config.epochs,
            "map": evaluate(run.model, eval_groups).map,
            "wall_seconds": run.wall_seconds,
        }
        for name, run_config, run in (("from_scratch", config, scratch), ("warmstart", finetune_config, warm))
    ]
    log.info(f"warmstart mAP {rows[1]['map']:.4f} vs from-scratch {rows[0]['map']:.4f}")
    return rows


def importance_report(
    model: CvrModel,
    groups: Sequence[RankingGroup],
    features: Union[Sequence[str], Mapping[str, Sequence[str]]],
    n_repeats: int = 5,
    seed: int = 0,
    anchor: Optional[str] = None,
) -> Tuple[Dict[str, float], Dict[str, float], bool]:
    """Mean mAP drop per report unit, the drops as percentage shares and whether the shares fell back to uniform.

    Args:
        model: trained model
        groups: evaluation groups
        features: feature names, each its own unit, or a mapping of category to member features whose drops are
            summed; members missing from the model schema are left out
        n_repeats: shuffle repeats
        seed: shuffle seed
        anchor: if set, every member is shuffled together with this feature (second-order importance)

    Raises:
        ContractError: if a category keeps no member

    Example:
        >>> categories = {"engagement": ["rating"], "understanding": ["brand", "title"]}
        >>> drops, shares, uniform = importance_report(
        ...     model, groups, categories, anchor=CUSTOMER_FEATURE
        ... )  # doctest: +SKIP

    """
    if isinstance(features, Mapping):
        units = {
            cat: tuple(name for name in members if name in model.schema and name != anchor)
            for cat, members in features.items()
        }
        empty = [cat for cat, members in units.items() if not members]
        if empty:
            raise ContractError(f"Categories {empty} keep no feature of the model schema")
    else:
        units = {name: (name,) for name in features if name != anchor}

    cache: Dict[str, float] = {}

    def _drop(name: str) -> float:
        if name not in cache:
            shuffled = name if anchor is None else (anchor, name)
            cache[name] = perm_importance(model, groups, shuffled, n_repeats, seed).mean
        return cache[name]

    drops = {unit: float(sum(_drop(name) for name in members)) for unit, members in units.items()}
    shares, uniform = normalize_importance(drops)
    return drops, shares, uniform

