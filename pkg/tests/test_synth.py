"""Test the synthetic ranking data generator."""

import os
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from cvrscale.errors import ContractError, SchemaError
from cvrscale.features import MISSING
from cvrscale.synth import (
    DISCOUNT_MAX,
    SynthSpec,
    World,
    canonical_schema,
    generate,
    oracle_map,
    planted_utility,
    project,
    read_dataset,
    window,
    write_dataset,
)
from tests.collection_models import TINY_SYNTH, tiny_dataset


def test_generation_is_deterministic() -> None:
    first, second = tiny_dataset(), tiny_dataset()
    assert first.digest() == second.digest()
    assert first.days == [0, 1, 2]
    assert len(first.groups) == 3 * TINY_SYNTH.groups_per_day
    other = generate(replace(TINY_SYNTH, seed=4))
    assert other.digest() != first.digest()
    # days are independent streams, so a longer run shares its first days
    longer = generate(replace(TINY_SYNTH, n_days=4))
    assert longer.day_digests()[1] == first.day_digests()[1]


def test_groups_and_labels() -> None:
    dataset = tiny_dataset()
    lo, hi = TINY_SYNTH.items_per_group
    for group in dataset.groups:
        assert lo <= group.n_items <= hi
        assert group.n_positives("purchase") == 1
        assert np.all(group.labels["click"] >= group.labels["purchase"])
        assert set(group.items[0]) == set(canonical_schema(TINY_SYNTH).names)


def test_feature_availability() -> None:
    dataset = tiny_dataset()
    assert all(item["history"] is MISSING for g in dataset.day_groups(0) for item in g.items)
    assert all(item["history"] is not MISSING for g in dataset.day_groups(1) for item in g.items)


def test_planted_utility_is_recomputable() -> None:
    world = World.from_spec(TINY_SYNTH)
    for group in tiny_dataset().day_groups(1):
        history = group.items[0]["history"]
        recomputed = [planted_utility(item, history, world, TINY_SYNTH.weights) for item in group.items]
        np.testing.assert_allclose(recomputed, group.utility)


def test_zero_temperature_buys_the_best_item() -> None:
    dataset = generate(replace(TINY_SYNTH, tau=0.0))
    assert oracle_map(dataset.groups) == 1.0
    noisy = oracle_map(tiny_dataset().groups)
    assert 0.0 < noisy < 1.0


def test_spec_round_trip_and_validation() -> None:
    spec = replace(TINY_SYNTH, multi_purchase=True)
    assert SynthSpec.from_dict(spec.to_dict()) == spec
    assert SynthSpec.from_dict(spec.to_dict()).digest() == spec.digest()
    with pytest.raises(ContractError, match="Temperature must be non-negative"):
        SynthSpec(tau=-1.0)
    with pytest.raises(ContractError, match="Need n_days, groups_per_day >= 1"):
        SynthSpec(items_per_group=(4, 2))
    with pytest.raises(SchemaError, match="Availability names unknown features"):
        SynthSpec(availability=(("colour", 1),))


def test_window_and_project() -> None:
    dataset = tiny_dataset()
    recent = window(dataset, 2)
    assert recent.days == [1, 2]
    assert {g.day for g in recent.groups} == {1, 2}
    with pytest.raises(ContractError, match="Window of 4 days"):
        window(dataset, 4)
    old_schema = canonical_schema(TINY_SYNTH, with_discount=False)
    projected = project(dataset.groups[:2], old_schema)
    assert "discount" not in projected[0].items[0]
    assert "discount" in dataset.groups[0].items[0]
    assert projected[0].labels["purchase"].tolist() == dataset.groups[0].labels["purchase"].tolist()


def test_dataset_files(tmp_path: Path) -> None:
    dataset = tiny_dataset()
    path = str(tmp_path / "data")
    digests = write_dataset(dataset, path)
    assert sorted(digests) == dataset.days
    assert sorted(os.listdir(path)) == [
        "day_000.csv",
        "day_001.csv",
        "day_002.csv",
        "manifest.csv",
        "schema.txt",
        "spec.json",
    ]
    loaded = read_dataset(path)
    assert loaded.digest() == dataset.digest()
    assert loaded.spec == dataset.spec
    assert loaded.groups[0].items == dataset.groups[0].items
    np.testing.assert_array_equal(loaded.groups[-1].utility, dataset.groups[-1].utility)
    assert read_dataset(path, days=[2]).days == [2]


def test_tampered_day_file(tmp_path: Path) -> None:
    path = str(tmp_path / "data")
    write_dataset(tiny_dataset(), path)
    with open(os.path.join(path, "day_001.csv"), "a", encoding="utf-8") as fopen:
        fopen.write("\n")
    with pytest.raises(ContractError, match="Day 1 file does not match its manifest digest"):
        read_dataset(path)


def test_utility_rises_with_rating() -> None:
    world = World.from_spec(TINY_SYNTH)
    weights = TINY_SYNTH.weights
    assert weights.rating > 0
    record = {
        "price": 20.0,
        "noise": 0.1,
        "brand": int(world.brand_keys[0]),
        "title": "b00 sleek",
        "discount": DISCOUNT_MAX / 2,
    }
    utilities = [planted_utility({**record, "rating": rating}, [], world, weights) for rating in (1.0, 2.5, 4.0, 5.0)]
    assert all(later > earlier for earlier, later in zip(utilities, utilities[1:]))
