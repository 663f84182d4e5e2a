"""The scoring server.

Tasks and ownership:

* connection handlers decode frames and offer requests to the batcher;
* one batcher task owns the queue and its dispatch decisions;
* a stage-A task and a stage-B task, each running its work on its own single-thread executor, linked by a
  bounded channel;
* one writer per connection that sends responses in request order.

A full queue answers with an overload response straight from the connection handler.

"""

import asyncio
import logging
from typing import List, Optional, Sequence, Tuple

import numpy as np

from cvrscale.checkpoint import load_checkpoint, model_from_checkpoint
from cvrscale.errors import ConfigError, CvrScaleError, WireError
from cvrscale.features import EncodedBatch, FeatureRecord, FeatureSchema
from cvrscale.model import CvrModel
from cvrscale.serving.batching import Batch, BatcherConfig, DynamicBatcher, Pending, RealClock, StageCost
from cvrscale.serving.pipeline import Clock, StagePipeline
from cvrscale.serving.wire import decode_request, encode_response, read_frame

log = logging.getLogger(__name__)


def load_server_model(checkpoint_path: str, schema_path: str) -> CvrModel:
    """Model from a checkpoint, refusing a schema with another fingerprint."""
    schema = FeatureSchema.load(schema_path)
    model = model_from_checkpoint(load_checkpoint(checkpoint_path), schema)
    log.info(f"Serving checkpoint {checkpoint_path} with schema fingerprint {schema.fingerprint:016x}")
    return model


class ScoringServer:
    """Dynamic-batching, two-stage scoring server.

    Args:
        model: scoring model
        batcher: dispatch thresholds and queue capacity
        cost_a: synthetic feature-stage cost
        cost_b: synthetic model-stage cost
        clock: charged with stage costs; a simulated clock makes them virtual
        channel_capacity: batches allowed to wait in front of each stage

    """

    def __init__(
        self,
        model: CvrModel,
        batcher: BatcherConfig,
        cost_a: Optional[StageCost] = None,
        cost_b: Optional[StageCost] = None,
        clock: Optional[Clock] = None,
        channel_capacity: int = 4,
    ) -> None:
        if channel_capacity < 1:
            raise ConfigError(f"Channel capacity must be positive, got {channel_capacity}")
        self.model = model
        self.batcher = DynamicBatcher(batcher)
        self.pipeline = StagePipeline(model, cost_a or StageCost(), cost_b or StageCost(), clock)
        self.channel_capacity = channel_capacity
        self._wall = RealClock()
        self._server: Optional[asyncio.AbstractServer] = None
        self._tasks: List["asyncio.Future[None]"] = []

    @property
    def schema(self) -> FeatureSchema:
        return self.model.schema

    async def start(self, host: str = "127.0.0.1", port: int = 0) -> int:
        """Listen and start the worker tasks; returns the bound port."""
        self._wake = asyncio.Event()
        self._dispatched: "asyncio.Queue[Batch]" = asyncio.Queue(self.channel_capacity)
        self._encoded: "asyncio.Queue[Tuple[Batch, EncodedBatch]]" = asyncio.Queue(self.channel_capacity)
        self._tasks = [
            asyncio.ensure_future(self._run_batcher()),
            asyncio.ensure_future(self._run_stage_a()),
            asyncio.ensure_future(self._run_stage_b()),
        ]
        self._server = await asyncio.start_server(self._handle, host, port)
        bound = self._server.sockets[0].getsockname()[1]
        log.info(f"Listening on {host}:{bound} with {self.batcher.config}")
        return bound

    async def serve_forever(self) -> None:
        if self._server is None:
            raise ConfigError("Server was not started")
        async with self._server:
            await self._server.serve_forever()

    async def close(self) -> None:
        if self._server is not None:
            self._server.close()
            await self._server.wait_closed()
        for task in self._tasks:
            task.cancel()
        await asyncio.gather(*self._tasks, return_exceptions=True)
        self.pipeline.close()

    async def _handle(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        peer = writer.get_extra_info("peername")
        outbox: "asyncio.Queue[Optional[Tuple[int, asyncio.Future]]]" = asyncio.Queue()
        responder = asyncio.ensure_future(self._respond(outbox, writer))
        loop = asyncio.get_running_loop()
        try:
            while True:
                payload = await read_frame(reader)
                if payload is None:
                    break
                request_id, records = decode_request(payload, self.schema)
                future: asyncio.Future = loop.create_future()
                pending = Pending(request_id, len(records), self._wall.now(), payload=(records, future))
                if not records:
                    future.set_result(np.zeros(0))
                elif self.batcher.offer(pending):
                    self._wake.set()
                else:
                    future.set_result(None)
                await outbox.put((request_id, future))
        except (WireError, ConnectionError) as ex:
            log.warning(f"Dropping connection {peer}: {ex}")
        finally:
            await outbox.put(None)
            await responder

    async def _respond(self, outbox: "asyncio.Queue", writer: asyncio.StreamWriter) -> None:
        try:
            while True:
                item = await outbox.get()
                if item is None:
                    break
                request_id, future = item
                scores = await future
                writer.write(encode_response(request_id, scores))
                await writer.drain()
        except ConnectionError as ex:
            log.warning(f"Client went away: {ex}")
        finally:
            writer.close()

    async def _run_batcher(self) -> None:
        while True:
            for batch in self.batcher.poll(self._wall.now()):
                await self._dispatched.put(batch)
            deadline = self.batcher.next_deadline()
            timeout = None if deadline is None else max(0.0, deadline - self._wall.now())
            try:
                await asyncio.wait_for(self._wake.wait(), timeout)
            except asyncio.TimeoutError:
                pass
            self._wake.clear()

    async def _run_stage_a(self) -> None:
        while True:
            batch = await self._dispatched.get()
            records: Sequence[FeatureRecord] = [rec for req in batch.requests for rec in req.payload[0]]
            try:
                encoded = await asyncio.wrap_future(self.pipeline.submit_a(records))
            except CvrScaleError as ex:
                _fail(batch, ex)
                continue
            await self._encoded.put((batch, encoded))

    async def _run_stage_b(self) -> None:
        while True:
            batch, encoded = await self._encoded.get()
            try:
                scores = await asyncio.wrap_future(self.pipeline.submit_b(encoded))
            except CvrScaleError as ex:
                _fail(batch, ex)
                continue
            _resolve(batch, scores)


def _resolve(batch: Batch, scores: np.ndarray) -> None:
    offset = 0
    for req in batch.requests:
        future = req.payload[1]
        if not future.done():
            future.set_result(scores[offset : offset + req.n_items])
        offset += req.n_items


def _fail(batch: Batch, ex: Exception) -> None:
    # the wire has no error code; failed requests answer as rejected
    log.error(f"Batch of {len(batch.requests)} requests failed: {ex}")
    for req in batch.requests:
        future = req.payload[1]
        if not future.done():
            future.set_result(None)


async def serve(
    model: CvrModel,
    batcher: BatcherConfig,
    cost_a: StageCost,
    cost_b: StageCost,
    host: str = "127.0.0.1",
    port: int = 7070,
    clock: Optional[Clock] = None,
) -> None:
    """Run a server until cancelled."""
    server = ScoringServer(model, batcher, cost_a, cost_b, clock)
    await server.start(host, port)
    try:
        await server.serve_forever()
    finally:
        await server.close()
