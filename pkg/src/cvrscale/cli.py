"""Command line entry point: ``cvrscale <command> [options]``.

Exit status is 0 on success, 2 on configuration errors and 1 on any other failure.
"""

import argparse
import asyncio
import logging
import sys
from dataclasses import asdict, is_dataclass
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

from cvrscale.__about__ import __version__
from cvrscale.checkpoint import load_checkpoint, model_from_checkpoint, save_checkpoint
from cvrscale.config import RunConfig, load_run_config
from cvrscale.errors import ConfigError, CvrScaleError, SchemaError
from cvrscale.evaluation import evaluate, write_eval_csv, write_importance_csv
from cvrscale.features import FeatureSchema
from cvrscale.harness import (
    ADDITIVITY_COLUMNS,
    CUSTOMER_FEATURE,
    FEATURE_CATEGORIES,
    GRID_COLUMNS,
    SWEEP_COLUMNS,
    WARMSTART_COLUMNS,
    AdditivitySpec,
    GridSpec,
    data_sweep,
    importance_report,
    run_additivity,
    run_grid,
    warmstart_compare,
)
from cvrscale.serving.batching import BatcherConfig, SimClock, StageCost
from cvrscale.serving.loadgen import REPORT_COLUMNS, LatencyReport, run_loadgen
from cvrscale.serving.server import load_server_model, serve
from cvrscale.serving.simulate import PEAK_COLUMNS, QpsSearch, peak_qps_search, simulate_load
from cvrscale.synth import SynthDataset, SynthSpec, generate, project, read_dataset, window, write_dataset
from cvrscale.training import split_by_day, train
from cvrscale.utils import digest_obj, write_csv

log = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"


def _ints(text: str) -> List[int]:
    try:
        return [int(part) for part in text.split(",") if part]
    except ValueError as ex:
        raise argparse.ArgumentTypeError(f"expected comma separated integers, got {text!r}") from ex


def _floats(text: str) -> List[float]:
    try:
        return [float(part) for part in text.split(",") if part]
    except ValueError as ex:
        raise argparse.ArgumentTypeError(f"expected comma separated numbers, got {text!r}") from ex


def _effective_digest(args: argparse.Namespace, **extra: Any) -> str:
    doc: Dict[str, Any] = {
        key: asdict(val) if is_dataclass(val) else val
        for key, val in vars(args).items()
        if key not in ("func", "log_level")
    }
    doc.update(extra)
    return digest_obj(doc)


def _run_config(args: argparse.Namespace) -> RunConfig:
    """Config document overridden by the flags that were given."""
    config = load_run_config(args.config) if args.config else RunConfig()
    overrides = {
        key: getattr(args, key)
        for key in ("seed", "epochs", "batch_size", "data_days")
        if getattr(args, key, None) is not None
    }
    return config.replace(**overrides) if overrides else config


def _dataset(args: argparse.Namespace, config: Optional[RunConfig] = None) -> SynthDataset:
    dataset = read_dataset(args.data)
    if config is not None and config.schema_path:
        schema = FeatureSchema.load(config.schema_path)
        dataset = SynthDataset(project(dataset.groups, schema), dataset.days, schema, dataset.spec)
    if config is not None and config.data_days:
        # one extra day stays reserved for evaluation
        dataset = window(dataset, min(len(dataset.days), config.data_days + 1))
    return dataset


def cmd_synth(args: argparse.Namespace) -> None:
    spec = SynthSpec(
        seed=args.seed,
        n_days=args.days,
        groups_per_day=args.groups_per_day,
        items_per_group=(args.items_min, args.items_max),
        tau=args.tau,
        multi_purchase=args.multi_purchase,
    )
    write_dataset(generate(spec), args.out)


def cmd_train(args: argparse.Namespace) -> None:
    config = _run_config(args)
    if args.warmstart_from:
        config = config.replace(warmstart_from=args.warmstart_from)
    dataset = _dataset(args, config)
    train_groups, _ = split_by_day(dataset.groups)
    result = train(config, train_groups, dataset.schema, metrics_path=args.metrics)
    digest = save_checkpoint(result.checkpoint, args.out)
    log.info(f"Checkpoint {args.out} digest {digest}")


def cmd_eval(args: argparse.Namespace) -> None:
    model = model_from_checkpoint(load_checkpoint(args.checkpoint))
    dataset = _dataset(args)
    groups = dataset.groups if args.all_days else split_by_day(dataset.groups)[1]
    summary = evaluate(model, project(groups, model.schema))
    log.info(f"mAP {summary.map:.6f} MRR {summary.mrr} over {summary.n_groups} groups")
    write_eval_csv(args.out, summary, _effective_digest(args, dataset=dataset.digest()))


def cmd_grid(args: argparse.Namespace) -> None:
    config = _run_config(args)
    grid = GridSpec(
        base=config,
        factor=args.factor,
        values=tuple(args.values),
        seeds=tuple(args.seeds),
        base_value=args.base_value,
        throughput_steps=args.throughput_steps,
        workers=args.workers,
    )
    dataset = _dataset(args, config)
    rows = run_grid(grid, dataset)
    write_csv(args.out, GRID_COLUMNS, rows, grid.digest(dataset.digest()))


def cmd_data_sweep(args: argparse.Namespace) -> None:
    config = _run_config(args)
    dataset = _dataset(args, config)
    rows, fit = data_sweep(config, dataset, args.windows, args.seeds)
    log.info(f"log-linear fit: slope {fit.slope:.5f} intercept {fit.intercept:.5f} R2 {fit.r2:.4f}")
    write_csv(args.out, SWEEP_COLUMNS, rows, _effective_digest(args, run=config.to_dict(), dataset=dataset.digest()))


def cmd_additivity(args: argparse.Namespace) -> None:
    config = _run_config(args)
    spec = AdditivitySpec(
        base_days=args.base_days,
        factor=args.factor,
        factor_value=args.factor_value,
        embed_dim=args.embed_dim,
        seeds=tuple(args.seeds),
    )
    dataset = _dataset(args, config)
    rows = run_additivity(config, dataset, spec)
    write_csv(args.out, ADDITIVITY_COLUMNS, rows, _effective_digest(args, run=config.to_dict()))


def _category(text: str) -> Tuple[str, List[str]]:
    name, sep, members = text.partition("=")
    if not sep or not name:
        raise argparse.ArgumentTypeError(f"expected NAME=feature,feature, got {text!r}")
    return name, [part for part in members.split(",") if part]


def cmd_importance(args: argparse.Namespace) -> None:
    model = model_from_checkpoint(load_checkpoint(args.checkpoint))
    dataset = _dataset(args)
    _, eval_groups = split_by_day(dataset.groups)
    anchor = args.anchor if args.pairs else None
    units: Union[List[str], Mapping[str, Sequence[str]]]
    if args.category:
        units = dict(args.category)
    elif args.features:
        units = args.features
    elif args.pairs:
        units = dict(FEATURE_CATEGORIES)
    else:
        units = list(model.schema.names)
    groups = project(eval_groups, model.schema)
    drops, shares, uniform = importance_report(model, groups, units, args.repeats, args.seed, anchor=anchor)
    if uniform:
        log.warning("No feature lowered mAP when shuffled; reporting uniform shares")
    for name, drop in drops.items():
        log.info(f"{name}: drop {drop:.5f} share {shares[name]:.2f}%")
    write_importance_csv(args.out, shares, _effective_digest(args, dataset=dataset.digest()))


def cmd_warmstart_compare(args: argparse.Namespace) -> None:
    config = _run_config(args)
    dataset = _dataset(args, config)
    rows = warmstart_compare(config, dataset, args.base_checkpoint, args.finetune_epochs, rebase=args.rebase)
    write_csv(args.out, WARMSTART_COLUMNS, rows, _effective_digest(args, run=config.to_dict()))


def _batcher(args: argparse.Namespace) -> BatcherConfig:
    return BatcherConfig(args.batch_timeout_ms / 1000.0, args.max_batch_items, args.queue_capacity)


def cmd_serve(args: argparse.Namespace) -> None:
    model = load_server_model(args.checkpoint, args.schema)
    clock = SimClock() if args.sim_clock else None
    asyncio.run(serve(model, _batcher(args), args.stage_a_cost, args.stage_b_cost, args.host, args.port, clock))


def cmd_loadgen(args: argparse.Namespace) -> None:
    report: LatencyReport
    if args.sim_clock:
        report = simulate_load(
            args.qps, args.duration_s, args.items, _batcher(args), args.stage_a_cost, args.stage_b_cost, args.seed
        )
    else:
        if not args.data or not args.schema:
            raise ConfigError("A live load run needs --data and --schema for the request records")
        schema = FeatureSchema.load(args.schema)
        records = [item for group in project(_dataset(args).groups, schema) for item in group.items]
        coro = run_loadgen(args.host, args.port, schema, records, args.qps, args.duration_s, args.items, args.seed)
        report = asyncio.run(coro)
    row = report.as_row()
    if args.latency_bound_ms is not None:
        log.info(f"p99 {row['p99_ms']} ms against the bound of {args.latency_bound_ms} ms")
    write_csv(args.out, REPORT_COLUMNS, [row], _effective_digest(args))


def cmd_qps_sweep(args: argparse.Namespace) -> None:
    search = QpsSearch(
        low=args.qps_low,
        high=args.qps_high,
        resolution=args.qps_resolution,
        duration_s=args.duration_s,
        items_per_request=args.items,
        seed=args.seed,
    )
    rows = peak_qps_search(
        args.latency_bound_ms,
        args.timeout_sweep,
        args.stage_a_cost,
        args.stage_b_cost,
        search,
        max_batch_items=args.max_batch_items,
        queue_capacity=args.queue_capacity,
    )
    write_csv(args.out, PEAK_COLUMNS, rows, _effective_digest(args))


def _add_run_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="run config JSON document")
    parser.add_argument("--data", required=True, help="dataset directory")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--epochs", type=int)
    parser.add_argument("--batch-size", dest="batch_size", type=int)
    parser.add_argument("--data-days", dest="data_days", type=int, help="most recent training days to use")
    parser.add_argument("--out", required=True, help="output path")


def _add_serving_flags(parser: argparse.ArgumentParser, cost_b: str = "0,0") -> None:
    parser.add_argument("--batch-timeout-ms", type=float, default=10.0)
    parser.add_argument("--max-batch-items", type=int, default=64)
    parser.add_argument("--queue-capacity", type=int, default=1024)
    parser.add_argument("--stage-a-cost", type=StageCost.parse_ms, default=StageCost(), help="fixed,per_item in ms")
    parser.add_argument("--stage-b-cost", type=StageCost.parse_ms, default=StageCost.parse_ms(cost_b))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cvrscale", description="CVR ranking scaling workbench")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--log-level", default="INFO", choices=("DEBUG", "INFO", "WARNING", "ERROR"))
    commands = parser.add_subparsers(dest="command", required=True)

    def command(name: str, func: Callable[[argparse.Namespace], None], help: str) -> argparse.ArgumentParser:
        sub = commands.add_parser(name, help=help)
        sub.set_defaults(func=func)
        return sub

    sub = command("synth", cmd_synth, "generate a planted-signal dataset")
    sub.add_argument("--out", required=True)
    sub.add_argument("--seed", type=int, default=7)
    sub.add_argument("--days", type=int, default=16)
    sub.add_argument("--groups-per-day", type=int, default=200)
    sub.add_argument("--items-min", type=int, default=8)
    sub.add_argument("--items-max", type=int, default=8)
    sub.add_argument("--tau", type=float, default=1.0)
    sub.add_argument("--multi-purchase", action="store_true")

    sub = command("train", cmd_train, "train a model, holding out the last day")
    _add_run_flags(sub)
    sub.add_argument("--metrics", help="CSV of interval training metrics")
    sub.add_argument("--warmstart-from", help="checkpoint to warmstart from")

    sub = command("eval", cmd_eval, "mAP of a checkpoint")
    sub.add_argument("--checkpoint", required=True)
    sub.add_argument("--data", required=True)
    sub.add_argument("--all-days", action="store_true", help="evaluate every day, not only the held-out one")
    sub.add_argument("--out", required=True)

    sub = command("grid", cmd_grid, "sweep one scaling factor")
    _add_run_flags(sub)
    sub.add_argument("--factor", required=True)
    sub.add_argument("--values", type=_ints, required=True)
    sub.add_argument("--seeds", type=_ints, default=[0, 1, 2])
    sub.add_argument("--base-value", type=int)
    sub.add_argument("--throughput-steps", type=int, default=20)
    sub.add_argument("--workers", type=int, default=1)

    sub = command("data-sweep", cmd_data_sweep, "sweep the training data window")
    _add_run_flags(sub)
    sub.add_argument("--windows", type=_ints, default=[2, 4, 8, 16])
    sub.add_argument("--seeds", type=_ints, default=[0, 1, 2])

    sub = command("additivity", cmd_additivity, "compound scaling additivity report")
    _add_run_flags(sub)
    sub.add_argument("--base-days", type=int, default=4)
    sub.add_argument("--factor", default="cross_width")
    sub.add_argument("--factor-value", type=int, default=128)
    sub.add_argument("--embed-dim", type=int, default=8)
    sub.add_argument("--seeds", type=_ints, default=[0, 1, 2])

    sub = command("importance", cmd_importance, "permutation feature importance")
    sub.add_argument("--checkpoint", required=True)
    sub.add_argument("--data", required=True)
    sub.add_argument("--features", type=lambda text: [p for p in text.split(",") if p])
    sub.add_argument("--pairs", action="store_true", help="shuffle each feature together with the anchor feature")
    sub.add_argument("--anchor", default=CUSTOMER_FEATURE, help="feature paired with every other one under --pairs")
    sub.add_argument(
        "--category", type=_category, action="append", help="NAME=feature,feature; report drops summed per category"
    )
    sub.add_argument("--repeats", type=int, default=5)
    sub.add_argument("--seed", type=int, default=0)
    sub.add_argument("--out", required=True)

    sub = command("warmstart-compare", cmd_warmstart_compare, "warmstart against from-scratch training")
    _add_run_flags(sub)
    sub.add_argument("--base-checkpoint", required=True)
    sub.add_argument("--finetune-epochs", type=int, default=2)
    sub.add_argument("--rebase", action="store_true", help="retrain the base model even if its checkpoint exists")

    sub = command("serve", cmd_serve, "run the scoring server")
    sub.add_argument("--checkpoint", required=True)
    sub.add_argument("--schema", required=True)
    sub.add_argument("--host", default="127.0.0.1")
    sub.add_argument("--port", type=int, default=7070)
    sub.add_argument("--sim-clock", action="store_true", help="account stage costs without sleeping")
    _add_serving_flags(sub)

    sub = command("loadgen", cmd_loadgen, "open-loop load against a server or the simulator")
    sub.add_argument("--host", default="127.0.0.1")
    sub.add_argument("--port", type=int, default=7070)
    sub.add_argument("--schema")
    sub.add_argument("--data")
    sub.add_argument("--qps", type=float, required=True)
    sub.add_argument("--duration-s", type=float, default=10.0)
    sub.add_argument("--items", type=int, default=1)
    sub.add_argument("--seed", type=int, default=0)
    sub.add_argument("--latency-bound-ms", type=float)
    sub.add_argument("--sim-clock", action="store_true", help="simulate the server instead of connecting")
    sub.add_argument("--out", required=True)
    _add_serving_flags(sub, cost_b="5,0.1")

    sub = command("qps-sweep", cmd_qps_sweep, "peak QPS per batch timeout under a latency bound")
    sub.add_argument("--latency-bound-ms", type=float, default=50.0)
    sub.add_argument("--timeout-sweep", type=_floats, default=[0, 5, 10, 15, 20, 30])
    sub.add_argument("--items", type=int, default=1)
    sub.add_argument("--duration-s", type=float, default=5.0)
    sub.add_argument("--seed", type=int, default=0)
    sub.add_argument("--qps-low", type=float, default=1.0)
    sub.add_argument("--qps-high", type=float, default=20000.0)
    sub.add_argument("--qps-resolution", type=float, default=10.0)
    sub.add_argument("--out", required=True)
    _add_serving_flags(sub, cost_b="5,0.1")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level), format=LOG_FORMAT)
    try:
        args.func(args)
    except (ConfigError, SchemaError) as ex:
        log.error(f"Configuration error: {ex}")
        return 2
    except (CvrScaleError, OSError) as ex:
        log.error(f"{type(ex).__name__}: {ex}")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
