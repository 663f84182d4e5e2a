"""Test run configs and the remapping of legacy config keys."""

from pathlib import Path
from typing import List

import pytest

from cvrscale.config import (
    DcnConfig,
    MmoeConfig,
    RunConfig,
    ScheduleConfig,
    backbone_from_dict,
    dump_json,
    load_run_config,
)
from cvrscale.deprecation import (
    LEGACY_BACKBONE_KEYS,
    LEGACY_RUN_KEYS,
    LEGACY_SCHEDULE_KEYS,
    LegacyKeys,
    no_warning_call,
    remap_legacy_keys,
)
from cvrscale.errors import ConfigError
from tests.collection_models import TINY_BACKBONES, tiny_run_config


@pytest.fixture(autouse=True)
def _fresh_legacy_counters() -> None:
    for legacy in (LEGACY_BACKBONE_KEYS, LEGACY_RUN_KEYS, LEGACY_SCHEDULE_KEYS):
        legacy.reset()


def test_run_config_round_trip() -> None:
    config = tiny_run_config(TINY_BACKBONES["dhen"], data_days=3)
    doc = config.to_dict()
    assert RunConfig.from_dict(doc) == config
    assert RunConfig.from_dict(doc).digest() == config.digest()
    assert config.replace(seed=5).digest() != config.digest()
    assert doc["backbone"]["family"] == "dhen"
    assert doc["mmoe"]["tasks"] == ["purchase", "click"]


def test_run_config_validation() -> None:
    with pytest.raises(ConfigError, match="Unknown run config keys"):
        RunConfig.from_dict({"optimizer": "sgd"})
    with pytest.raises(ConfigError, match="Need batch_size >= 1"):
        RunConfig(batch_size=0)
    with pytest.raises(ConfigError, match="`warmup_fraction` must be within"):
        ScheduleConfig(warmup_fraction=1.5)
    assert MmoeConfig().primary_task == "purchase"


def test_config_file(tmp_path: Path) -> None:
    path = str(tmp_path / "nested" / "run.json")
    config = tiny_run_config(TINY_BACKBONES["rankmixer"])
    dump_json(config.to_dict(), path)
    assert load_run_config(path) == config


def test_legacy_run_keys() -> None:
    with pytest.warns(
        FutureWarning,
        match="The `run` config uses deprecated keys: `batch` -> `batch_size`."
        " They were deprecated since v0.2 and will be removed in v0.4.",
    ):
        config = RunConfig.from_dict({"batch": 8, "epochs": 1})
    assert config.batch_size == 8
    # warned once per key in the process lifetime
    with no_warning_call(FutureWarning):
        assert RunConfig.from_dict({"batch": 4}).batch_size == 4


def test_legacy_new_key_wins() -> None:
    with pytest.warns(FutureWarning, match="`legacy_seed_offset` -> \\(dropped\\)"):
        config = RunConfig.from_dict({"batch": 8, "batch_size": 2, "legacy_seed_offset": 3})
    assert config.batch_size == 2


def test_legacy_nested_sections() -> None:
    with pytest.warns(FutureWarning, match="The `backbone` config uses deprecated keys: `width` -> `cross_width`"):
        backbone = backbone_from_dict({"family": "dcnv2", "width": 32, "low_rank": 8})
    assert backbone == DcnConfig(cross_width=32, low_rank=8)
    with pytest.warns(FutureWarning, match="The `schedule` config uses deprecated keys: `lr` -> `lr_peak`"):
        config = RunConfig.from_dict({"schedule": {"lr": 0.01}})
    assert config.schedule.lr_peak == 0.01


def test_current_keys_do_not_warn() -> None:
    with no_warning_call():
        RunConfig.from_dict(tiny_run_config().to_dict())


def test_legacy_keys_streams() -> None:
    messages: List[str] = []
    loud = LegacyKeys("grid", {"vals": "values"}, "0.1", "0.3", num_warns=-1, stream=messages.append)
    for _ in range(3):
        assert remap_legacy_keys({"vals": [1, 2]}, loud) == {"values": [1, 2]}
    assert len(messages) == 3
    assert messages[0] == (
        "The `grid` config uses deprecated keys: `vals` -> `values`."
        " They were deprecated since v0.1 and will be removed in v0.3."
    )
    quiet = LegacyKeys("grid", {"vals": "values"}, stream=None)
    with no_warning_call():
        assert remap_legacy_keys({"vals": 1, "seed": 2}, quiet) == {"values": 1, "seed": 2}
