"""Binary request/response frames of the scoring server.

A frame is a 4-byte big-endian payload length followed by the payload; all fields are big-endian.

Request payload::

    request_id  u64
    n_items     u16
    n records, each feature in schema order:
        numerical    f32         (NaN = MISSING)
        categorical  u64         (0xFFFFFFFFFFFFFFFF = MISSING)
        text         u16 length + UTF-8 bytes   (length 0xFFFF = MISSING)
        sequential   u16 count + count x u64     (count 0xFFFF = MISSING)

Response payload::

    request_id  u64
    n_items     u16         (0xFFFF = overload, no scores follow)
    n scores    f32

"""

import asyncio
import math
import struct
from typing import Any, List, Optional, Sequence, Tuple

import numpy as np

from cvrscale.errors import WireError
from cvrscale.features import MISSING, FeatureRecord, FeatureSchema

MAX_PAYLOAD = 16 * 1024 * 1024
#: item count marking an overload response
OVERLOAD = 0xFFFF
MAX_ITEMS = OVERLOAD - 1
MISSING_KEY = 0xFFFFFFFFFFFFFFFF
MISSING_LEN = 0xFFFF

_HEAD = struct.Struct(">QH")
_LEN = struct.Struct(">I")
_U16 = struct.Struct(">H")
_U64 = struct.Struct(">Q")
_F32 = struct.Struct(">f")


def frame(payload: bytes) -> bytes:
    """Prefix ``payload`` with its length.

    Example:
        >>> frame(b"ab").hex()
        '000000026162'

    """
    if len(payload) > MAX_PAYLOAD:
        raise WireError(f"Payload of {len(payload)} bytes exceeds the {MAX_PAYLOAD} byte limit")
    return _LEN.pack(len(payload)) + payload


def _encode_value(kind: str, value: Any) -> bytes:
    if kind == "numerical":
        return _F32.pack(math.nan if value is MISSING else float(value))
    if kind == "categorical":
        return _U64.pack(MISSING_KEY if value is MISSING else int(value))
    if kind == "text":
        if value is MISSING:
            return _U16.pack(MISSING_LEN)
        raw = str(value).encode("utf-8")
        if len(raw) >= MISSING_LEN:
            raise WireError(f"Text of {len(raw)} bytes is too long for the wire")
        return _U16.pack(len(raw)) + raw
    if value is MISSING:
        return _U16.pack(MISSING_LEN)
    keys = [int(key) for key in value]
    if len(keys) >= MISSING_LEN:
        raise WireError(f"Key list of {len(keys)} entries is too long for the wire")
    return _U16.pack(len(keys)) + b"".join(_U64.pack(key) for key in keys)


def encode_request(request_id: int, records: Sequence[FeatureRecord], schema: FeatureSchema) -> bytes:
    """Framed request carrying ``records``."""
    if len(records) > MAX_ITEMS:
        raise WireError(f"Request with {len(records)} items exceeds {MAX_ITEMS}")
    parts = [_HEAD.pack(request_id, len(records))]
    for record in records:
        parts.extend(_encode_value(spec.kind, record.get(spec.name, MISSING)) for spec in schema.specs)
    return frame(b"".join(parts))


class _Cursor:
    def __init__(self, payload: bytes) -> None:
        self.payload = payload
        self.pos = 0

    def take(self, fmt: struct.Struct) -> Tuple[Any, ...]:
        if self.pos + fmt.size > len(self.payload):
            raise WireError(f"Truncated payload at byte {self.pos}")
        values = fmt.unpack_from(self.payload, self.pos)
        self.pos += fmt.size
        return values

    def raw(self, size: int) -> bytes:
        if self.pos + size > len(self.payload):
            raise WireError(f"Truncated payload at byte {self.pos}")
        chunk = self.payload[self.pos : self.pos + size]
        self.pos += size
        return chunk

    def done(self) -> None:
        if self.pos != len(self.payload):
            raise WireError(f"{len(self.payload) - self.pos} trailing bytes after the payload")


def _decode_value(kind: str, cur: _Cursor) -> Any:
    if kind == "numerical":
        (val,) = cur.take(_F32)
        return MISSING if math.isnan(val) else float(val)
    if kind == "categorical":
        (key,) = cur.take(_U64)
        return MISSING if key == MISSING_KEY else key
    (size,) = cur.take(_U16)
    if size == MISSING_LEN:
        return MISSING
    if kind == "text":
        try:
            return cur.raw(size).decode("utf-8")
        except UnicodeDecodeError as ex:
            raise WireError(f"Text field is not UTF-8: {ex}") from ex
    return [cur.take(_U64)[0] for _ in range(size)]


def decode_request(payload: bytes, schema: FeatureSchema) -> Tuple[int, List[FeatureRecord]]:
    """Request id and records of an unframed request payload."""
    cur = _Cursor(payload)
    request_id, n_items = cur.take(_HEAD)
    if n_items > MAX_ITEMS:
        raise WireError(f"Request item count {n_items} exceeds {MAX_ITEMS}")
    records = [{spec.name: _decode_value(spec.kind, cur) for spec in schema.specs} for _ in range(n_items)]
    cur.done()
    return request_id, records


def encode_response(request_id: int, scores: Optional[np.ndarray]) -> bytes:
    """Framed response; ``None`` scores make an overload response."""
    if scores is None:
        return frame(_HEAD.pack(request_id, OVERLOAD))
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size > MAX_ITEMS:
        raise WireError(f"Response with {scores.size} scores exceeds {MAX_ITEMS}")
    return frame(_HEAD.pack(request_id, scores.size) + scores.astype(">f4").tobytes())


def decode_response(payload: bytes) -> Tuple[int, Optional[np.ndarray]]:
    """Request id and float32 scores widened to float64; ``None`` marks an overload response."""
    cur = _Cursor(payload)
    request_id, n_items = cur.take(_HEAD)
    if n_items == OVERLOAD:
        cur.done()
        return request_id, None
    scores = np.frombuffer(cur.raw(4 * n_items), dtype=">f4").astype(np.float64)
    cur.done()
    return request_id, scores


async def read_frame(reader: asyncio.StreamReader) -> Optional[bytes]:
    """Next payload from the stream, or ``None`` on a clean end of stream."""
    try:
        head = await reader.readexactly(_LEN.size)
    except asyncio.IncompleteReadError as ex:
        if ex.partial:
            raise WireError("Stream ended inside a frame header") from ex
        return None
    (size,) = _LEN.unpack(head)
    if size > MAX_PAYLOAD:
        raise WireError(f"Frame of {size} bytes exceeds the {MAX_PAYLOAD} byte limit")
    try:
        return await reader.readexactly(size)
    except asyncio.IncompleteReadError as ex:
        raise WireError(f"Stream ended after {len(ex.partial)} of {size} payload bytes") from ex
