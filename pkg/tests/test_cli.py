"""Test the command line entry point and its exit statuses."""

import os
from pathlib import Path

import pytest

from cvrscale.cli import build_parser, main
from cvrscale.config import dump_json
from cvrscale.evaluation import read_importance_csv
from cvrscale.serving.batching import StageCost
from cvrscale.utils import read_csv
from tests.collection_models import tiny_run_config

SYNTH_ARGS = ["--days", "3", "--groups-per-day", "8", "--items-min", "4", "--items-max", "5", "--seed", "3"]


def test_parser_defaults() -> None:
    args = build_parser().parse_args(["qps-sweep", "--out", "peak.csv", "--stage-b-cost", "2,0.5"])
    assert args.timeout_sweep == [0, 5, 10, 15, 20, 30]
    assert args.latency_bound_ms == 50.0
    assert args.stage_a_cost == StageCost()
    assert args.stage_b_cost == StageCost(0.002, 0.0005)
    args = build_parser().parse_args(["grid", "--data", "d", "--out", "o", "--factor", "d_model", "--values", "8,16"])
    assert args.values == [8, 16]
    assert args.seeds == [0, 1, 2]
    assert args.epochs is None


def test_parser_rejects_bad_lists() -> None:
    with pytest.raises(SystemExit):
        build_parser().parse_args(["grid", "--data", "d", "--out", "o", "--factor", "x", "--values", "8,a"])


def test_version() -> None:
    with pytest.raises(SystemExit) as info:
        main(["--version"])
    assert info.value.code == 0


def test_synth_train_eval_importance(tmp_path: Path) -> None:
    data = str(tmp_path / "data")
    config = str(tmp_path / "run.json")
    ckpt = str(tmp_path / "model.ckpt")
    dump_json(tiny_run_config().to_dict(), config)

    assert main(["synth", "--out", data, *SYNTH_ARGS]) == 0
    assert "manifest.csv" in os.listdir(data)
    metrics = str(tmp_path / "metrics.csv")
    train_args = ["train", "--config", config, "--data", data, "--epochs", "1", "--out", ckpt, "--metrics", metrics]
    assert main(train_args) == 0
    assert os.path.isfile(ckpt)
    assert os.path.isfile(metrics)

    report = str(tmp_path / "eval.csv")
    assert main(["eval", "--checkpoint", ckpt, "--data", data, "--out", report]) == 0
    digest, rows = read_csv(report)
    assert digest
    assert [row["metric"] for row in rows] == ["map", "mrr", "n_groups", "n_excluded"]
    assert rows[2]["value"] == "8"
    assert 0.0 < float(rows[0]["value"]) <= 1.0

    shares = str(tmp_path / "importance.csv")
    args = ["importance", "--checkpoint", ckpt, "--data", data, "--features", "rating,noise", "--repeats", "2"]
    assert main([*args, "--out", shares]) == 0
    _, rows = read_csv(shares)
    assert sorted(row["category"] for row in rows) == ["noise", "rating"]

    pairs = str(tmp_path / "pairs.csv")
    assert main(["importance", "--checkpoint", ckpt, "--data", data, "--pairs", "--repeats", "1", "--out", pairs]) == 0
    assert sorted(read_importance_csv(pairs)) == ["engagement", "item_query_understanding"]
    custom = ["--category", "eng=rating,price", "--category", "items=brand,title"]
    assert main(["importance", "--checkpoint", ckpt, "--data", data, "--pairs", *custom, "--out", pairs]) == 0
    by_category = read_importance_csv(pairs)
    assert sorted(by_category) == ["eng", "items"]
    assert sum(by_category.values()) == pytest.approx(100.0)


def test_configuration_errors_exit_2(tmp_path: Path) -> None:
    data = str(tmp_path / "data")
    assert main(["synth", "--out", data, *SYNTH_ARGS]) == 0
    config = str(tmp_path / "run.json")
    dump_json({"optimizer": "sgd"}, config)
    assert main(["train", "--config", config, "--data", data, "--out", str(tmp_path / "m.ckpt")]) == 2
    assert main(["loadgen", "--qps", "10", "--out", str(tmp_path / "load.csv")]) == 2


def test_other_failures_exit_1(tmp_path: Path) -> None:
    data = str(tmp_path / "data")
    assert main(["synth", "--out", data, *SYNTH_ARGS]) == 0
    missing = str(tmp_path / "missing.ckpt")
    assert main(["eval", "--checkpoint", missing, "--data", data, "--out", str(tmp_path / "eval.csv")]) == 1


def test_simulated_loadgen(tmp_path: Path) -> None:
    out = str(tmp_path / "load.csv")
    args = ["loadgen", "--sim-clock", "--qps", "50", "--duration-s", "2", "--batch-timeout-ms", "5", "--out", out]
    assert main(args) == 0
    digest, rows = read_csv(out)
    assert digest
    assert int(rows[0]["n_sent"]) > 0
    assert rows[0]["n_sent"] == rows[0]["n_ok"]
    assert rows[0]["valid"] == "1"


def test_qps_sweep(tmp_path: Path) -> None:
    out = str(tmp_path / "peak.csv")
    args = ["qps-sweep", "--timeout-sweep", "5", "--duration-s", "1", "--qps-low", "10", "--qps-high", "2000"]
    assert main([*args, "--qps-resolution", "50", "--out", out]) == 0
    _, rows = read_csv(out)
    assert [row["batch_timeout_ms"] for row in rows] == ["0", "5"]
    assert rows[0]["ratio"] == "1"
