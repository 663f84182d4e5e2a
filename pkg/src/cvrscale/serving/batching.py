"""Server-side dynamic batching and the synthetic stage cost model.

A batch leaves the queue when either the queued items reach ``max_batch_items`` or ``batch_timeout`` has passed
since the oldest queued request arrived. Batches are FIFO prefixes of whole requests: a request is never split or
reordered, and a single request larger than ``max_batch_items`` travels alone.

"""

import logging
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from typing import Any, Deque, List, Optional, Sequence, Tuple

from cvrscale.errors import ConfigError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class BatcherConfig:
    """Dispatch thresholds; times in seconds.

    Example:
        >>> BatcherConfig(batch_timeout=0.0, max_batch_items=1).is_passthrough
        True

    """

    batch_timeout: float = 0.0
    max_batch_items: int = 1
    queue_capacity: int = 1024

    def __post_init__(self) -> None:
        if self.batch_timeout < 0 or self.max_batch_items < 1 or self.queue_capacity < 1:
            raise ConfigError(
                "Batcher needs batch_timeout >= 0, max_batch_items >= 1 and queue_capacity >= 1, got"
                f" {self.batch_timeout} / {self.max_batch_items} / {self.queue_capacity}"
            )

    @property
    def is_passthrough(self) -> bool:
        return self.batch_timeout == 0 and self.max_batch_items == 1


@dataclass(frozen=True)
class StageCost:
    """Synthetic stage delay ``fixed + per_item * n`` in seconds."""

    fixed: float = 0.0
    per_item: float = 0.0

    def __post_init__(self) -> None:
        if self.fixed < 0 or self.per_item < 0:
            raise ConfigError(f"Stage costs must be non-negative, got {self.fixed} / {self.per_item}")

    def delay(self, n_items: int) -> float:
        return self.fixed + self.per_item * n_items

    @classmethod
    def parse_ms(cls, text: str) -> "StageCost":
        """Read the CLI form ``fixed,per_item`` in milliseconds.

        Example:
            >>> StageCost.parse_ms("5,0.1")
            StageCost(fixed=0.005, per_item=0.0001)

        """
        try:
            fixed, per_item = (float(part) for part in text.split(","))
        except ValueError as ex:
            raise ConfigError(f"Stage cost {text!r} must read `fixed,per_item` in milliseconds") from ex
        return cls(fixed / 1000.0, per_item / 1000.0)


class RealClock:
    """Wall clock; charging a cost sleeps the calling thread."""

    def now(self) -> float:
        return time.perf_counter()

    def charge(self, seconds: float) -> None:
        if seconds > 0:
            time.sleep(seconds)


class SimClock:
    """Virtual clock; charging a cost advances it without sleeping."""

    def __init__(self, start: float = 0.0) -> None:
        self._now = start
        self._lock = threading.Lock()

    def now(self) -> float:
        return self._now

    def charge(self, seconds: float) -> None:
        with self._lock:
            self._now += seconds

    def advance_to(self, moment: float) -> None:
        with self._lock:
            self._now = max(self._now, moment)


@dataclass
class Pending:
    """A queued request."""

    request_id: int
    n_items: int
    arrival: float
    payload: Any = None


@dataclass
class Batch:
    """Requests dispatched together at ``dispatched``."""

    requests: List[Pending]
    dispatched: float
    reason: str = "size"

    @property
    def n_items(self) -> int:
        return sum(req.n_items for req in self.requests)


class DynamicBatcher:
    """FIFO queue with size- and timeout-triggered dispatch; owned by a single task."""

    def __init__(self, config: BatcherConfig) -> None:
        self.config = config
        self.queue: Deque[Pending] = deque()
        self.queued_items = 0
        self.rejected = 0

    def __len__(self) -> int:
        return len(self.queue)

    def offer(self, request: Pending) -> bool:
        """Queue ``request``; ``False`` (and nothing queued) when the queue is full."""
        if len(self.queue) >= self.config.queue_capacity:
            self.rejected += 1
            log.debug(f"Queue full, rejecting request {request.request_id}")
            return False
        self.queue.append(request)
        self.queued_items += request.n_items
        return True

    def next_deadline(self) -> Optional[float]:
        """Moment the oldest queued request times out."""
        return self.queue[0].arrival + self.config.batch_timeout if self.queue else None

    def _pop_prefix(self, now: float, reason: str) -> Batch:
        taken = [self.queue.popleft()]
        total = taken[0].n_items
        while self.queue and total + self.queue[0].n_items <= self.config.max_batch_items:
            total += self.queue[0].n_items
            taken.append(self.queue.popleft())
        self.queued_items -= total
        log.debug(f"Dispatching {len(taken)} requests / {total} items on {reason} at {now:.6f}")
        return Batch(taken, now, reason)

    def poll(self, now: float) -> List[Batch]:
        """All batches due at ``now``, oldest first."""
        batches = []
        while self.queue and self.queued_items >= self.config.max_batch_items:
            batches.append(self._pop_prefix(now, "size"))
        deadline = self.next_deadline()
        if deadline is not None and now >= deadline:
            while self.queue:
                batches.append(self._pop_prefix(now, "timeout"))
        return batches


@dataclass
class TraceResult:
    """Batches formed from an arrival trace and the requests rejected on overflow."""

    batches: List[Batch] = field(default_factory=list)
    rejected: List[int] = field(default_factory=list)


def dynamic_batch(arrivals: Sequence[Tuple[float, int]], config: BatcherConfig) -> TraceResult:
    """Replay ``(arrival_time, n_items)`` requests through the batcher on a simulated clock.

    Request ids are positions in ``arrivals``, which must be sorted by time.

    Example:
        >>> cfg = BatcherConfig(batch_timeout=0.010, max_batch_items=2)
        >>> [b.n_items for b in dynamic_batch([(0.0, 1), (0.001, 1), (0.002, 1)], cfg).batches]
        [2, 1]

    """
    batcher = DynamicBatcher(config)
    result = TraceResult()
    for idx, (arrival, n_items) in enumerate(arrivals):
        result.batches.extend(drain_until(batcher, arrival))
        if not batcher.offer(Pending(idx, n_items, arrival)):
            result.rejected.append(idx)
        result.batches.extend(batcher.poll(arrival))
    result.batches.extend(drain_until(batcher, float("inf")))
    return result


def drain_until(batcher: DynamicBatcher, moment: float) -> List[Batch]:
    """Timeout batches falling due up to ``moment``, each dispatched at its own deadline."""
    batches: List[Batch] = []
    deadline = batcher.next_deadline()
    while deadline is not None and deadline <= moment:
        batches.extend(batcher.poll(deadline))
        deadline = batcher.next_deadline()
    return batches
