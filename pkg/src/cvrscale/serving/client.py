"""Client side of the scoring server: upstream item chunking and a pipelined connection."""

import asyncio
import itertools
import logging
from collections import deque
from typing import Deque, List, Optional, Sequence, Tuple, TypeVar

import numpy as np

from cvrscale.errors import ConfigError, OverloadError, WireError
from cvrscale.features import FeatureRecord, FeatureSchema
from cvrscale.serving.wire import decode_response, encode_request, read_frame

log = logging.getLogger(__name__)

T = TypeVar("T")


def client_batch(items: Sequence[T], max_per_request: int) -> List[Sequence[T]]:
    """Chunk one query's items into FIFO requests of at most ``max_per_request``.

    Example:
        >>> [len(chunk) for chunk in client_batch(list(range(5)), 2)]
        [2, 2, 1]

    """
    if max_per_request < 1:
        raise ConfigError(f"max_per_request must be at least 1, got {max_per_request}")
    return [items[start : start + max_per_request] for start in range(0, len(items), max_per_request)]


class ServeClient:
    """One connection with any number of requests in flight; responses arrive in request order.

    Example::

        client = await ServeClient.connect("127.0.0.1", 7070, schema)
        scores = await client.score(records)
        await client.close()

    """

    def __init__(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter, schema: FeatureSchema) -> None:
        self.reader = reader
        self.writer = writer
        self.schema = schema
        self._ids = itertools.count()
        self._waiting: Deque[Tuple[int, "asyncio.Future[Optional[np.ndarray]]"]] = deque()
        self._pump = asyncio.ensure_future(self._read_responses())

    @classmethod
    async def connect(cls, host: str, port: int, schema: FeatureSchema) -> "ServeClient":
        reader, writer = await asyncio.open_connection(host, port)
        return cls(reader, writer, schema)

    async def _read_responses(self) -> None:
        try:
            while True:
                payload = await read_frame(self.reader)
                if payload is None:
                    raise WireError("Server closed the connection")
                request_id, scores = decode_response(payload)
                if not self._waiting:
                    raise WireError(f"Unsolicited response for request {request_id}")
                expected, future = self._waiting.popleft()
                if request_id != expected:
                    raise WireError(f"Response for request {request_id} arrived while {expected} was due")
                if not future.done():
                    future.set_result(scores)
        except (WireError, ConnectionError) as ex:
            while self._waiting:
                _, future = self._waiting.popleft()
                if not future.done():
                    future.set_exception(ex)

    def submit(self, records: Sequence[FeatureRecord]) -> "asyncio.Future[Optional[np.ndarray]]":
        """Send a request; the future yields its scores, or ``None`` on overload."""
        if self._pump.done():
            raise WireError("Connection is closed")
        request_id = next(self._ids)
        # a request which fails to encode never takes a slot in the response order
        data = encode_request(request_id, records, self.schema)
        future: "asyncio.Future[Optional[np.ndarray]]" = asyncio.get_running_loop().create_future()
        self._waiting.append((request_id, future))
        self.writer.write(data)
        return future

    async def score(self, records: Sequence[FeatureRecord]) -> np.ndarray:
        scores = await self.submit(records)
        if scores is None:
            raise OverloadError(f"Server rejected a request of {len(records)} items")
        return scores

    async def score_query(self, records: Sequence[FeatureRecord], max_per_request: int) -> np.ndarray:
        """Score one query's items split into chunks, reassembled in item order."""
        futures = [self.submit(chunk) for chunk in client_batch(records, max_per_request)]
        await self.writer.drain()
        parts = []
        for future in futures:
            scores = await future
            if scores is None:
                raise OverloadError("Server rejected part of a chunked query")
            parts.append(scores)
        return np.concatenate(parts) if parts else np.zeros(0)

    async def close(self) -> None:
        self.writer.close()
        try:
            await self.writer.wait_closed()
        except ConnectionError:
            log.debug("Connection already reset while closing")
        self._pump.cancel()
