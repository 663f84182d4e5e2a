"""Test the versioned parameter store."""

import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np
import pytest

from cvrscale.checkpoint import (
    MAGIC,
    Checkpoint,
    checkpoint_from_model,
    load_checkpoint,
    model_from_checkpoint,
    save_checkpoint,
)
from cvrscale.errors import IncompatibleCheckpointError
from cvrscale.features import FeatureSpec, NormStats
from cvrscale.model import CvrModel
from tests.collection_models import TINY_BACKBONES, TINY_SCHEMA, tiny_records, tiny_run_config


def _tiny_model() -> CvrModel:
    stats = NormStats({"rating": 3.0}, {"rating": 1.0})
    return CvrModel.initialize(TINY_SCHEMA, tiny_run_config(TINY_BACKBONES["transformer"]), stats)


def test_layout_is_aligned() -> None:
    ckpt = Checkpoint(
        fingerprint=7,
        stats=NormStats(),
        params=OrderedDict([("a", np.arange(3.0)), ("b", np.ones((2, 2)))]),
    )
    data = ckpt.to_bytes()
    assert data[:8] == MAGIC
    (header_len,) = struct.unpack_from("<Q", data, 8)
    payload_start = 16 + header_len + (-(16 + header_len) % 8)
    assert payload_start % 8 == 0
    assert len(data) == payload_start + 7 * 8
    np.testing.assert_array_equal(np.frombuffer(data, dtype="<f8", offset=payload_start)[:3], [0.0, 1.0, 2.0])
    again = Checkpoint.from_bytes(data)
    assert list(again.params) == ["a", "b"]
    assert again.shapes() == {"a": (3,), "b": (2, 2)}
    assert again.fingerprint == 7


def test_model_survives_file(tmp_path: Path) -> None:
    model = _tiny_model()
    path = str(tmp_path / "model.ckpt")
    digest = save_checkpoint(checkpoint_from_model(model, {"steps": 3}), path)
    loaded = load_checkpoint(path)
    assert loaded.digest() == digest
    assert loaded.metadata["steps"] == 3
    rebuilt = model_from_checkpoint(loaded, TINY_SCHEMA)
    assert rebuilt.config == model.config
    assert list(rebuilt.params) == list(model.params)
    np.testing.assert_allclose(rebuilt.score(tiny_records()), model.score(tiny_records()))


def test_fingerprint_mismatch() -> None:
    ckpt = checkpoint_from_model(_tiny_model())
    grown = TINY_SCHEMA.with_feature(FeatureSpec("discount", "numerical"))
    with pytest.raises(IncompatibleCheckpointError, match="Schema fingerprint .* differs from checkpoint"):
        model_from_checkpoint(ckpt, grown)


def test_corrupted_files() -> None:
    data = checkpoint_from_model(_tiny_model()).to_bytes()
    with pytest.raises(IncompatibleCheckpointError, match="Not a checkpoint"):
        Checkpoint.from_bytes(b"XXXXXXXX" + data[8:])
    with pytest.raises(IncompatibleCheckpointError, match="is truncated inside tensor"):
        Checkpoint.from_bytes(data[:-8])
    broken = data[:16] + b"X" + data[17:]
    with pytest.raises(IncompatibleCheckpointError, match="Corrupted checkpoint header"):
        Checkpoint.from_bytes(broken)
