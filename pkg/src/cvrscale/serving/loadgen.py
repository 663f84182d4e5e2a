"""Open-loop load generation and latency reports.

Requests are sent on a Poisson schedule fixed in advance from the seed; a slow server never delays the next send,
and each latency is measured from the request's scheduled send time.

"""

import asyncio
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from cvrscale.errors import ConfigError, MeasurementError
from cvrscale.features import FeatureRecord, FeatureSchema
from cvrscale.serving.client import ServeClient
from cvrscale.utils import SplitMix64

log = logging.getLogger(__name__)

ARRIVAL_STREAM = 0x4C47
PERCENTILES = (0.5, 0.9, 0.99)
REPORT_COLUMNS = ("offered_qps", "achieved_qps", "n_sent", "n_ok", "n_failed", "p50_ms", "p90_ms", "p99_ms", "valid")


def nearest_rank(samples: Sequence[float], q: float) -> float:
    """Value at 1-based rank ``ceil(q * N)`` of the sorted samples.

    Example:
        >>> nearest_rank([float(ms) for ms in range(1, 101)], 0.99)
        99.0

    """
    if not 0 < q <= 1:
        raise ConfigError(f"Percentile must lie in (0, 1], got {q}")
    if len(samples) == 0:
        raise MeasurementError("No latency samples to take a percentile of")
    ordered = np.sort(np.asarray(samples, dtype=np.float64))
    # tolerance keeps q*N that is integral in exact arithmetic from rounding up
    rank = max(1, math.ceil(q * len(ordered) - 1e-9))
    return float(ordered[rank - 1])


@dataclass
class LatencyReport:
    """Per-request latencies of one load run.

    ``valid`` is false when the run saw no traffic, failed connections or overload rejections.
    """

    samples_ms: List[float] = field(default_factory=list)
    offered_qps: float = 0.0
    achieved_qps: float = 0.0
    n_sent: int = 0
    n_failed: int = 0
    n_rejected: int = 0
    valid: bool = True

    @property
    def n_ok(self) -> int:
        return len(self.samples_ms)

    def percentile(self, q: float) -> Optional[float]:
        return nearest_rank(self.samples_ms, q) if self.samples_ms else None

    @property
    def p50(self) -> Optional[float]:
        return self.percentile(0.5)

    @property
    def p90(self) -> Optional[float]:
        return self.percentile(0.9)

    @property
    def p99(self) -> Optional[float]:
        return self.percentile(0.99)

    def as_row(self) -> Dict[str, object]:
        return {
            "offered_qps": self.offered_qps,
            "achieved_qps": self.achieved_qps,
            "n_sent": self.n_sent,
            "n_ok": self.n_ok,
            "n_failed": self.n_failed + self.n_rejected,
            "p50_ms": self.p50,
            "p90_ms": self.p90,
            "p99_ms": self.p99,
            "valid": int(self.valid and self.n_ok > 0),
        }


def arrival_times(qps: float, duration_s: float, seed: int) -> np.ndarray:
    """Poisson send schedule in seconds from the start, all before ``duration_s``.

    Example:
        >>> times = arrival_times(100.0, 1.0, seed=3)
        >>> bool(np.all(np.diff(times) > 0)) and float(times[-1]) < 1.0
        True

    """
    if qps <= 0 or duration_s <= 0:
        raise ConfigError(f"Load needs qps > 0 and duration > 0, got {qps} / {duration_s}")
    rng = SplitMix64(seed).fork(ARRIVAL_STREAM)
    chunks: List[np.ndarray] = []
    last = 0.0
    while last < duration_s:
        gaps = rng.exponential(qps, max(16, int(qps * duration_s * 1.2)))
        times = last + np.cumsum(gaps)
        chunks.append(times)
        last = float(times[-1])
    times = np.concatenate(chunks)
    return times[times < duration_s]


async def run_loadgen(
    host: str,
    port: int,
    schema: FeatureSchema,
    records: Sequence[FeatureRecord],
    qps: float,
    duration_s: float,
    items_per_request: int,
    seed: int = 0,
    log_every: int = 500,
) -> LatencyReport:
    """Drive a live server open-loop; connection failures yield a partial report flagged invalid."""
    if items_per_request < 1 or not records:
        raise ConfigError(f"Need records and items_per_request >= 1, got {len(records)} / {items_per_request}")
    schedule = arrival_times(qps, duration_s, seed)
    report = LatencyReport(offered_qps=qps)
    try:
        client = await ServeClient.connect(host, port, schema)
    except OSError as ex:
        log.warning(f"Cannot reach the server at {host}:{port}: {ex}")
        report.valid = False
        return report

    start = time.perf_counter()

    async def one(idx: int, scheduled: float) -> None:
        offset = (idx * items_per_request) % len(records)
        chunk = [records[(offset + k) % len(records)] for k in range(items_per_request)]
        try:
            scores = await client.submit(chunk)
        except Exception as ex:  # connection dropped mid-run
            log.warning(f"Request {idx} failed: {ex}")
            report.n_failed += 1
            return
        if scores is None:
            report.n_rejected += 1
            return
        report.samples_ms.append((time.perf_counter() - start - scheduled) * 1000.0)

    tasks = []
    for idx, scheduled in enumerate(schedule):
        delay = start + scheduled - time.perf_counter()
        if delay > 0:
            await asyncio.sleep(delay)
        tasks.append(asyncio.ensure_future(one(idx, float(scheduled))))
        report.n_sent += 1
        if idx % log_every == 0:
            elapsed = time.perf_counter() - start
            log.info(f"sent={idx} elapsed={elapsed:.2f}s approx_qps={idx / elapsed if elapsed > 0 else 0.0:.1f}")
    await asyncio.gather(*tasks)
    elapsed = time.perf_counter() - start
    await client.close()

    report.achieved_qps = report.n_ok / elapsed if elapsed > 0 else 0.0
    report.valid = report.n_failed == 0 and report.n_rejected == 0 and report.n_ok > 0
    log.info(f"n={report.n_ok} p50={report.p50}ms p90={report.p90}ms p99={report.p99}ms")
    return report
