"""Versioned parameter store.

File layout (all integers little-endian)::

    b"CVRCKPT1"                 8 bytes magic
    header_len                  uint64
    header                      UTF-8 JSON, canonical (sorted keys, no spaces)
    zero padding                up to the next multiple of 8
    payloads                    float64 tensors, row-major, in directory order

The header holds ``version``, ``fingerprint`` (schema digest), ``config_digest``, ``stats``, ``metadata`` and
``tensors``: a list of ``{"name", "shape", "offset", "nbytes"}`` entries with offsets relative to the payload
start. Each payload is a whole number of float64 values, so every tensor starts 8-byte aligned.

"""

import json
import logging
import os
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Any, Dict, Mapping, Optional, Tuple

import numpy as np

from cvrscale.config import RunConfig
from cvrscale.errors import IncompatibleCheckpointError
from cvrscale.features import FeatureSchema, NormStats
from cvrscale.model import CvrModel
from cvrscale.numerics import Tensor
from cvrscale.utils import canonical_json, digest_bytes

log = logging.getLogger(__name__)

MAGIC = b"CVRCKPT1"
FORMAT_VERSION = 1
_ALIGN = 8


@dataclass
class Checkpoint:
    """Parameters by name with everything needed to rebuild and validate the model."""

    fingerprint: int
    stats: NormStats
    params: "OrderedDict[str, np.ndarray]"
    config_digest: str = ""
    metadata: Dict[str, Any] = field(default_factory=dict)
    version: int = FORMAT_VERSION

    def to_bytes(self) -> bytes:
        directory = []
        offset = 0
        payloads = []
        for name, values in self.params.items():
            blob = np.ascontiguousarray(values, dtype="<f8").tobytes()
            directory.append({"name": name, "shape": list(values.shape), "offset": offset, "nbytes": len(blob)})
            payloads.append(blob)
            offset += len(blob)
        header = canonical_json(
            {
                "version": self.version,
                "fingerprint": int(self.fingerprint),
                "config_digest": self.config_digest,
                "stats": self.stats.to_dict(),
                "metadata": self.metadata,
                "tensors": directory,
            }
        ).encode("utf-8")
        head = MAGIC + struct.pack("<Q", len(header)) + header
        return head + b"\0" * (-len(head) % _ALIGN) + b"".join(payloads)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        if data[: len(MAGIC)] != MAGIC:
            raise IncompatibleCheckpointError(f"Not a checkpoint, magic bytes are {data[:len(MAGIC)]!r}")
        (header_len,) = struct.unpack_from("<Q", data, len(MAGIC))
        start = len(MAGIC) + 8
        header = _parse_header(data[start : start + header_len])
        if header["version"] != FORMAT_VERSION:
            raise IncompatibleCheckpointError(f"Unsupported checkpoint version {header['version']}")
        base = start + header_len
        base += -base % _ALIGN
        params: "OrderedDict[str, np.ndarray]" = OrderedDict()
        for entry in header["tensors"]:
            lo = base + entry["offset"]
            if lo + entry["nbytes"] > len(data):
                raise IncompatibleCheckpointError(f"Checkpoint is truncated inside tensor `{entry['name']}`")
            values = np.frombuffer(data, dtype="<f8", count=entry["nbytes"] // 8, offset=lo)
            params[entry["name"]] = values.astype(np.float64).reshape(tuple(entry["shape"]))
        return cls(
            fingerprint=int(header["fingerprint"]),
            stats=NormStats.from_dict(header["stats"]),
            params=params,
            config_digest=header["config_digest"],
            metadata=header["metadata"],
            version=header["version"],
        )

    def digest(self) -> str:
        """SHA-256 of the serialized file."""
        return digest_bytes(self.to_bytes())

    def shapes(self) -> Dict[str, Tuple[int, ...]]:
        return {name: values.shape for name, values in self.params.items()}


def _parse_header(raw: bytes) -> Dict[str, Any]:
    try:
        return json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, ValueError) as ex:
        raise IncompatibleCheckpointError(f"Corrupted checkpoint header: {ex}") from ex


def save_checkpoint(ckpt: Checkpoint, path: str) -> str:
    """Write ``ckpt`` to ``path`` and return its digest."""
    dirname = os.path.dirname(path)
    if dirname:
        os.makedirs(dirname, exist_ok=True)
    data = ckpt.to_bytes()
    with open(path, "wb") as fopen:
        fopen.write(data)
    log.info(f"Saved checkpoint with {len(ckpt.params)} tensors to {path}")
    return digest_bytes(data)


def load_checkpoint(path: str) -> Checkpoint:
    with open(path, "rb") as fopen:
        ckpt = Checkpoint.from_bytes(fopen.read())
    log.info(f"Loaded checkpoint with {len(ckpt.params)} tensors from {path}")
    return ckpt


def checkpoint_from_model(model: CvrModel, metadata: Optional[Mapping[str, Any]] = None) -> Checkpoint:
    """Snapshot of the model; config and schema travel in the metadata so the model can be rebuilt."""
    meta = dict(metadata or {})
    meta.update(config=model.config.to_dict(), schema=model.schema.to_text())
    return Checkpoint(
        fingerprint=model.schema.fingerprint,
        stats=model.stats,
        params=OrderedDict((name, tensor.data.copy()) for name, tensor in model.params.items()),
        config_digest=model.config.digest(),
        metadata=meta,
    )


def model_from_checkpoint(ckpt: Checkpoint, schema: Optional[FeatureSchema] = None) -> CvrModel:
    """Rebuild the model; a given ``schema`` must carry the checkpoint's fingerprint."""
    stored = FeatureSchema.from_text(ckpt.metadata["schema"])
    if schema is not None and schema.fingerprint != ckpt.fingerprint:
        raise IncompatibleCheckpointError(
            f"Schema fingerprint {schema.fingerprint:#018x} differs from checkpoint {ckpt.fingerprint:#018x}"
        )
    config = RunConfig.from_dict(ckpt.metadata["config"])
    params = OrderedDict(
        (name, Tensor(values.copy(), requires_grad=True, name=name)) for name, values in ckpt.params.items()
    )
    return CvrModel(schema or stored, config, params, ckpt.stats)
