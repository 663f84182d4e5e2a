"""Serving on a simulated clock: the server's batcher and stage cost model without sockets or sleeps.

Runs are deterministic in their seed, which makes them the measurement behind ``qps-sweep`` and ``loadgen
--sim-clock``.

"""

import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np

from cvrscale.errors import ConfigError
from cvrscale.serving.batching import BatcherConfig, StageCost, dynamic_batch
from cvrscale.serving.loadgen import LatencyReport, arrival_times
from cvrscale.serving.pipeline import schedule_batches

log = logging.getLogger(__name__)

PEAK_COLUMNS = ("batch_timeout_ms", "max_batch_items", "peak_qps", "ratio", "flag")


def simulate_serving(
    arrivals: Sequence[float],
    items_per_request: int,
    batcher: BatcherConfig,
    cost_a: StageCost,
    cost_b: StageCost,
    pipelined: bool = True,
    channel_capacity: Optional[int] = None,
    offered_qps: float = 0.0,
) -> LatencyReport:
    """Latencies of requests arriving at ``arrivals`` (seconds), each carrying ``items_per_request`` items.

    Example:
        >>> cfg = BatcherConfig(batch_timeout=0.010, max_batch_items=8)
        >>> report = simulate_serving([0.0, 0.001, 0.002], 1, cfg, StageCost(), StageCost(0.005))
        >>> [round(ms, 6) for ms in report.samples_ms]
        [15.0, 14.0, 13.0]

    """
    if items_per_request < 1:
        raise ConfigError(f"items_per_request must be at least 1, got {items_per_request}")
    trace = dynamic_batch([(float(moment), items_per_request) for moment in arrivals], batcher)
    report = LatencyReport(offered_qps=offered_qps, n_sent=len(arrivals), n_rejected=len(trace.rejected))
    if not trace.batches:
        report.valid = False
        return report
    times = schedule_batches(
        [batch.n_items for batch in trace.batches],
        [batch.dispatched for batch in trace.batches],
        cost_a,
        cost_b,
        pipelined=pipelined,
        channel_capacity=channel_capacity,
    )
    finished = np.zeros(len(arrivals))
    for batch, timing in zip(trace.batches, times):
        for req in batch.requests:
            finished[req.request_id] = timing.b_end
    served = sorted(req.request_id for batch in trace.batches for req in batch.requests)
    report.samples_ms = [(finished[idx] - arrivals[idx]) * 1000.0 for idx in served]
    span = max(float(times[-1].b_end), float(arrivals[-1]))
    report.achieved_qps = report.n_ok / span if span > 0 else 0.0
    report.valid = report.n_rejected == 0
    return report


def simulate_load(
    qps: float,
    duration_s: float,
    items_per_request: int,
    batcher: BatcherConfig,
    cost_a: StageCost,
    cost_b: StageCost,
    seed: int = 0,
    pipelined: bool = True,
) -> LatencyReport:
    """Open-loop Poisson load on the simulated server."""
    arrivals = arrival_times(qps, duration_s, seed)
    if len(arrivals) == 0:
        return LatencyReport(offered_qps=qps, valid=False)
    return simulate_serving(arrivals, items_per_request, batcher, cost_a, cost_b, pipelined, offered_qps=qps)


@dataclass(frozen=True)
class QpsSearch:
    """Bisection range and per-step load; ``resolution`` is in requests per second."""

    low: float = 1.0
    high: float = 20000.0
    resolution: float = 10.0
    duration_s: float = 5.0
    items_per_request: int = 1
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0 < self.low < self.high or self.resolution <= 0 or self.duration_s <= 0:
            raise ConfigError(
                f"QPS search needs 0 < low < high, resolution > 0 and duration > 0, got {self.low} / {self.high}"
                f" / {self.resolution} / {self.duration_s}"
            )


def meets_bound(report: LatencyReport, latency_bound_ms: float) -> bool:
    """p99 within the bound with every request served."""
    p99 = report.p99
    return report.n_rejected == 0 and report.n_failed == 0 and p99 is not None and p99 <= latency_bound_ms


def peak_qps(
    latency_bound_ms: float, batcher: BatcherConfig, cost_a: StageCost, cost_b: StageCost, search: QpsSearch
) -> Optional[float]:
    """Highest offered QPS within ``latency_bound_ms``; ``None`` when even ``search.low`` violates it."""

    def fits(qps: float) -> bool:
        report = simulate_load(qps, search.duration_s, search.items_per_request, batcher, cost_a, cost_b, search.seed)
        return meets_bound(report, latency_bound_ms)

    if not fits(search.low):
        return None
    if fits(search.high):
        log.warning(f"Peak QPS for {batcher} reaches the search ceiling {search.high}")
        return search.high
    low, high = search.low, search.high
    while high - low > search.resolution:
        mid = (low + high) / 2.0
        if fits(mid):
            low = mid
        else:
            high = mid
    return low


def peak_qps_search(
    latency_bound_ms: float,
    timeouts_ms: Sequence[float],
    cost_a: StageCost,
    cost_b: StageCost,
    search: Optional[QpsSearch] = None,
    max_batch_items: int = 64,
    queue_capacity: int = 100000,
) -> List[Dict[str, object]]:
    """Peak QPS per batch timeout, led by the timeout-0 passthrough baseline.

    Rows carry ``ratio`` against the baseline and a ``flag`` of ``ok``, ``bound_violated`` (peak reported as 0)
    or ``ceiling``.
    """
    if latency_bound_ms <= 0 or not timeouts_ms:
        raise ConfigError(f"Need a positive latency bound and at least one timeout, got {latency_bound_ms}")
    search = search or QpsSearch()
    rows: List[Dict[str, object]] = []
    baseline: Optional[float] = None
    sweep = [0.0] + [float(ms) for ms in timeouts_ms if float(ms) != 0.0]
    for timeout_ms in sweep:
        items = 1 if timeout_ms == 0 else max_batch_items
        batcher = BatcherConfig(timeout_ms / 1000.0, items, queue_capacity)
        peak = peak_qps(latency_bound_ms, batcher, cost_a, cost_b, search)
        flag = "bound_violated" if peak is None else ("ceiling" if peak >= search.high else "ok")
        value = peak or 0.0
        if timeout_ms == 0:
            baseline = value
        ratio = value / baseline if baseline else None
        log.info(f"batch_timeout={timeout_ms}ms peak_qps={value:.1f} ratio={ratio} flag={flag}")
        rows.append(
            {"batch_timeout_ms": timeout_ms, "max_batch_items": items, "peak_qps": value, "ratio": ratio, "flag": flag}
        )
    return rows
