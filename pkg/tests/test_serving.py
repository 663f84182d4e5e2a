"""Test the wire format, batching, stage scheduling, load reports and the live scoring server."""

import asyncio
from typing import List, Optional, Tuple

import numpy as np
import pytest

from cvrscale.errors import ConfigError, MeasurementError, WireError
from cvrscale.features import FeatureSchema, NormStats
from cvrscale.model import CvrModel
from cvrscale.serving import (
    BatcherConfig,
    LatencyReport,
    QpsSearch,
    ScoringServer,
    ServeClient,
    StageCost,
    client_batch,
    dynamic_batch,
    nearest_rank,
    peak_qps_search,
    schedule_batches,
    simulate_serving,
    stage_pipeline,
)
from cvrscale.serving.wire import (
    MAX_ITEMS,
    decode_request,
    decode_response,
    encode_request,
    encode_response,
    read_frame,
)
from tests.collection_models import TINY_SCHEMA, tiny_records, tiny_run_config


def _tiny_model() -> CvrModel:
    stats = NormStats({"rating": 3.0}, {"rating": 1.0})
    return CvrModel.initialize(TINY_SCHEMA, tiny_run_config(), stats)


def test_request_bytes() -> None:
    schema = FeatureSchema((TINY_SCHEMA["rating"], TINY_SCHEMA["brand"]))
    data = encode_request(1, [{"rating": 4.5, "brand": 7}], schema)
    assert data.hex() == "00000016" "0000000000000001" "0001" "40900000" "0000000000000007"
    assert decode_request(data[4:], schema) == (1, [{"rating": 4.5, "brand": 7}])


def test_request_keeps_missing_values() -> None:
    records = tiny_records()
    data = encode_request(9, records, TINY_SCHEMA)
    assert decode_request(data[4:], TINY_SCHEMA) == (9, records)


def test_response_frames() -> None:
    data = encode_response(3, np.array([0.5, -2.0]))
    request_id, scores = decode_response(data[4:])
    assert request_id == 3
    assert scores is not None
    assert scores.tolist() == [0.5, -2.0]
    assert decode_response(encode_response(4, None)[4:]) == (4, None)


def test_broken_payloads() -> None:
    payload = encode_request(1, tiny_records(), TINY_SCHEMA)[4:]
    with pytest.raises(WireError, match="Truncated payload"):
        decode_request(payload[:-3], TINY_SCHEMA)
    with pytest.raises(WireError, match="2 trailing bytes"):
        decode_request(payload + b"\x00\x00", TINY_SCHEMA)


def test_read_frame() -> None:
    async def _read(chunks: List[bytes]) -> List[Optional[bytes]]:
        reader = asyncio.StreamReader()
        for chunk in chunks:
            reader.feed_data(chunk)
        reader.feed_eof()
        return [await read_frame(reader), await read_frame(reader)]

    assert asyncio.run(_read([b"\x00\x00\x00\x02a", b"b"])) == [b"ab", None]
    with pytest.raises(WireError, match="after 1 of 2 payload bytes"):
        asyncio.run(_read([b"\x00\x00\x00\x02a"]))


def test_size_and_timeout_dispatch() -> None:
    config = BatcherConfig(batch_timeout=0.010, max_batch_items=2)
    batches = dynamic_batch([(0.0, 1), (0.001, 1), (0.002, 1)], config).batches
    assert [b.reason for b in batches] == ["size", "timeout"]
    assert [b.dispatched for b in batches] == pytest.approx([0.001, 0.012])
    assert [[req.request_id for req in b.requests] for b in batches] == [[0, 1], [2]]


def test_requests_within_timeout_share_a_batch() -> None:
    config = BatcherConfig(batch_timeout=0.010, max_batch_items=64)
    batches = dynamic_batch([(0.0, 2), (0.004, 3), (0.009, 1)], config).batches
    assert len(batches) == 1
    assert batches[0].n_items == 6
    assert batches[0].dispatched == pytest.approx(0.010)


def test_large_request_travels_alone() -> None:
    config = BatcherConfig(batch_timeout=0.010, max_batch_items=2)
    batches = dynamic_batch([(0.0, 5), (0.001, 1)], config).batches
    assert [b.n_items for b in batches] == [5, 1]
    assert batches[0].dispatched == 0.0


def test_full_queue_rejects() -> None:
    config = BatcherConfig(batch_timeout=1.0, max_batch_items=10, queue_capacity=1)
    trace = dynamic_batch([(0.0, 1), (0.1, 1), (1.5, 1)], config)
    assert trace.rejected == [1]
    assert [[req.request_id for req in b.requests] for b in trace.batches] == [[0], [2]]
    with pytest.raises(ConfigError, match="Batcher needs"):
        BatcherConfig(max_batch_items=0)


def test_channel_capacity_holds_stage_a() -> None:
    args = ([1, 1, 1, 1], [0.0] * 4, StageCost(1.0), StageCost(3.0))
    unbounded = schedule_batches(*args)
    bounded = schedule_batches(*args, channel_capacity=1)
    assert [t.a_start for t in unbounded] == [0.0, 1.0, 2.0, 3.0]
    assert [t.a_start for t in bounded] == [0.0, 1.0, 2.0, 4.0]
    assert [t.b_end for t in bounded] == [4.0, 7.0, 10.0, 13.0]
    with pytest.raises(ConfigError, match="Got 1 batch sizes for 2 ready times"):
        schedule_batches([1], [0.0, 1.0], StageCost(), StageCost())


def test_stage_pipeline_scores() -> None:
    model = _tiny_model()
    records = tiny_records()
    batches = [records[:2], records[2:], records]
    for pipelined in (True, False):
        results = stage_pipeline(model, batches, StageCost(), StageCost(), pipelined=pipelined)
        assert len(results) == len(batches)
        for scores, batch in zip(results, batches):
            np.testing.assert_allclose(scores, model.score(batch))


def test_nearest_rank() -> None:
    samples = [float(ms) for ms in range(100, 0, -1)]
    assert nearest_rank(samples, 0.99) == 99.0
    assert nearest_rank(samples, 0.5) == 50.0
    assert nearest_rank(samples, 1.0) == 100.0
    assert nearest_rank([7.0], 0.01) == 7.0
    with pytest.raises(MeasurementError, match="No latency samples"):
        nearest_rank([], 0.5)
    with pytest.raises(ConfigError, match="Percentile must lie in"):
        nearest_rank(samples, 0.0)


def test_latency_report_row() -> None:
    report = LatencyReport(samples_ms=[1.0, 2.0, 3.0], offered_qps=10.0, n_sent=4, n_rejected=1)
    row = report.as_row()
    assert row["n_ok"] == 3
    assert row["n_failed"] == 1
    assert row["p50_ms"] == 2.0
    assert LatencyReport().as_row()["valid"] == 0


def test_client_batch() -> None:
    assert client_batch(list("abcde"), 2) == [["a", "b"], ["c", "d"], ["e"]]
    assert client_batch([], 3) == []
    with pytest.raises(ConfigError, match="max_per_request must be at least 1"):
        client_batch([1], 0)


def test_simulated_pipelining() -> None:
    config = BatcherConfig(batch_timeout=0.0, max_batch_items=1)
    arrivals = [0.0, 0.0, 0.0]
    overlap = simulate_serving(arrivals, 1, config, StageCost(0.002), StageCost(0.002))
    serial = simulate_serving(arrivals, 1, config, StageCost(0.002), StageCost(0.002), pipelined=False)
    np.testing.assert_allclose(overlap.samples_ms, [4.0, 6.0, 8.0])
    np.testing.assert_allclose(serial.samples_ms, [4.0, 8.0, 12.0])
    assert overlap.valid


def test_batching_raises_peak_qps() -> None:
    search = QpsSearch(low=10.0, high=20000.0, resolution=20.0, duration_s=2.0, seed=5)
    rows = peak_qps_search(
        50.0, [2.0], StageCost(), StageCost(fixed=0.005, per_item=0.0001), search=search, max_batch_items=64
    )
    assert [row["batch_timeout_ms"] for row in rows] == [0.0, 2.0]
    assert rows[0]["max_batch_items"] == 1
    assert rows[0]["ratio"] == 1.0
    assert rows[0]["flag"] == "ok"
    assert rows[1]["ratio"] >= 2.0
    with pytest.raises(ConfigError, match="Need a positive latency bound"):
        peak_qps_search(0.0, [2.0], StageCost(), StageCost())


async def _serve_and_score(model: CvrModel, config: BatcherConfig, requests: List[list]) -> List[Optional[np.ndarray]]:
    server = ScoringServer(model, config)
    port = await server.start()
    client = await ServeClient.connect("127.0.0.1", port, model.schema)
    try:
        futures = [client.submit(records) for records in requests]
        return [await future for future in futures]
    finally:
        await client.close()
        await server.close()


def test_server_matches_offline_scores() -> None:
    model = _tiny_model()
    records = tiny_records()
    requests = [records[:2], records[2:], [], records]
    config = BatcherConfig(batch_timeout=0.005, max_batch_items=4)
    answers = asyncio.run(_serve_and_score(model, config, requests))
    for scores, batch in zip(answers, requests):
        assert scores is not None
        assert scores.shape == (len(batch),)
        if batch:
            # scores travel as float32
            np.testing.assert_allclose(scores, model.score(batch), rtol=1e-6)


def test_server_chunked_query() -> None:
    model = _tiny_model()

    async def _run() -> np.ndarray:
        server = ScoringServer(model, BatcherConfig(batch_timeout=0.002, max_batch_items=8))
        port = await server.start()
        client = await ServeClient.connect("127.0.0.1", port, model.schema)
        try:
            return await client.score_query(tiny_records(), max_per_request=2)
        finally:
            await client.close()
            await server.close()

    scores = asyncio.run(_run())
    np.testing.assert_allclose(scores, model.score(tiny_records()), rtol=1e-6)


def test_server_overload() -> None:
    model = _tiny_model()
    config = BatcherConfig(batch_timeout=0.5, max_batch_items=100, queue_capacity=1)
    record = tiny_records()[:1]
    answers = asyncio.run(_serve_and_score(model, config, [record, record, record]))
    assert answers[0] is not None
    assert answers[1] is None
    assert answers[2] is None


def test_client_survives_unencodable_request() -> None:
    model = _tiny_model()

    async def _run() -> np.ndarray:
        server = ScoringServer(model, BatcherConfig(batch_timeout=0.002, max_batch_items=8))
        port = await server.start()
        client = await ServeClient.connect("127.0.0.1", port, model.schema)
        try:
            with pytest.raises(WireError, match="exceeds"):
                client.submit([{}] * (MAX_ITEMS + 1))
            return await client.score(tiny_records()[:1])
        finally:
            await client.close()
            await server.close()

    scores = asyncio.run(_run())
    np.testing.assert_allclose(scores, model.score(tiny_records()[:1]), rtol=1e-6)


async def _burst(
    model: CvrModel, config: BatcherConfig, requests: List[list]
) -> Tuple[List[Optional[np.ndarray]], List[int]]:
    server = ScoringServer(model, config)
    port = await server.start()
    client = await ServeClient.connect("127.0.0.1", port, model.schema)
    completed: List[int] = []
    try:
        futures = []
        for idx, records in enumerate(requests):
            future = client.submit(records)
            future.add_done_callback(lambda _, idx=idx: completed.append(idx))
            futures.append(future)
        return [await client_future for client_future in futures], completed
    finally:
        await client.close()
        await server.close()


def test_batching_is_transparent() -> None:
    model = _tiny_model()
    records = tiny_records()
    requests = [records[:1], records, records[1:], records[2:], records[:2], records[1:2], records]
    passthrough, _ = asyncio.run(_burst(model, BatcherConfig(batch_timeout=0.0, max_batch_items=1), requests))
    for timeout, max_items in ((0.002, 2), (0.005, 4), (0.020, 64)):
        answers, completed = asyncio.run(_burst(model, BatcherConfig(timeout, max_items), requests))
        # responses complete in request order even when batches split the burst
        assert completed == list(range(len(requests)))
        for scores, expected, batch in zip(answers, passthrough, requests):
            assert scores is not None and expected is not None
            assert scores.shape == (len(batch),)
            np.testing.assert_allclose(scores, expected, rtol=1e-6)
