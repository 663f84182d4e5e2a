"""Two-stage scoring: stage A encodes records, stage B runs the model.

With pipelining, stage A of batch ``k+1`` overlaps stage B of batch ``k``; without it a batch finishes stage B
before the next batch enters stage A.

"""

import logging
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import dataclass
from typing import List, Optional, Sequence, Union

import numpy as np

from cvrscale.errors import ConfigError
from cvrscale.features import EncodedBatch, FeatureRecord
from cvrscale.model import CvrModel
from cvrscale.serving.batching import RealClock, SimClock, StageCost

log = logging.getLogger(__name__)

Clock = Union[RealClock, SimClock]


@dataclass(frozen=True)
class StageTimes:
    """Start and end of both stages for one batch."""

    a_start: float
    a_end: float
    b_start: float
    b_end: float


def schedule_batches(
    sizes: Sequence[int],
    ready: Sequence[float],
    cost_a: StageCost,
    cost_b: StageCost,
    pipelined: bool = True,
    channel_capacity: Optional[int] = None,
) -> List[StageTimes]:
    """Stage timings of batches taken in order, batch ``k`` becoming available at ``ready[k]``.

    ``channel_capacity`` bounds how many encoded batches may wait between the stages; ``None`` is unbounded.

    Example:
        >>> times = schedule_batches([1, 1], [0.0, 0.0], StageCost(1.0), StageCost(1.0))
        >>> [t.b_end for t in times]
        [2.0, 3.0]
        >>> times = schedule_batches([1, 1], [0.0, 0.0], StageCost(1.0), StageCost(1.0), pipelined=False)
        >>> [t.b_end for t in times]
        [2.0, 4.0]

    """
    if len(sizes) != len(ready):
        raise ConfigError(f"Got {len(sizes)} batch sizes for {len(ready)} ready times")
    if channel_capacity is not None and channel_capacity < 1:
        raise ConfigError(f"Channel capacity must be positive, got {channel_capacity}")
    times: List[StageTimes] = []
    a_free = b_free = 0.0
    for idx, (size, moment) in enumerate(zip(sizes, ready)):
        a_start = max(moment, a_free if pipelined else b_free)
        if pipelined and channel_capacity is not None and idx > channel_capacity:
            # stage A holds its output until a channel slot frees up
            a_start = max(a_start, times[idx - channel_capacity - 1].b_start)
        a_end = a_start + cost_a.delay(size)
        b_start = max(a_end, b_free)
        b_end = b_start + cost_b.delay(size)
        times.append(StageTimes(a_start, a_end, b_start, b_end))
        a_free, b_free = a_end, b_end
    return times


class StagePipeline:
    """Runs each stage on its own single worker thread, charging the synthetic cost to ``clock``.

    Args:
        model: scoring model
        cost_a: synthetic feature-stage cost
        cost_b: synthetic model-stage cost
        clock: real or simulated clock

    """

    def __init__(
        self, model: CvrModel, cost_a: StageCost, cost_b: StageCost, clock: Optional[Clock] = None
    ) -> None:
        self.model = model
        self.cost_a = cost_a
        self.cost_b = cost_b
        self.clock = clock or RealClock()
        self._pool_a = ThreadPoolExecutor(max_workers=1, thread_name_prefix="stage-a")
        self._pool_b = ThreadPoolExecutor(max_workers=1, thread_name_prefix="stage-b")

    def stage_a(self, records: Sequence[FeatureRecord]) -> EncodedBatch:
        encoded = self.model.encode(records)
        self.clock.charge(self.cost_a.delay(len(records)))
        return encoded

    def stage_b(self, encoded: EncodedBatch) -> np.ndarray:
        scores = self.model.score_encoded(encoded)
        self.clock.charge(self.cost_b.delay(len(scores)))
        return scores

    def submit_a(self, records: Sequence[FeatureRecord]) -> "Future[EncodedBatch]":
        return self._pool_a.submit(self.stage_a, records)

    def submit_b(self, encoded: EncodedBatch) -> "Future[np.ndarray]":
        return self._pool_b.submit(self.stage_b, encoded)

    def score(self, records: Sequence[FeatureRecord]) -> np.ndarray:
        """Both stages back to back for one batch."""
        return self.submit_b(self.submit_a(records).result()).result()

    def close(self) -> None:
        self._pool_a.shutdown(wait=True)
        self._pool_b.shutdown(wait=True)

    def __enter__(self) -> "StagePipeline":
        return self

    def __exit__(self, *exc: object) -> None:
        self.close()


def stage_pipeline(
    model: CvrModel, batches: Sequence[Sequence[FeatureRecord]], cost_a: StageCost, cost_b: StageCost,
    pipelined: bool = True,
) -> List[np.ndarray]:
    """Score ``batches`` in order; pipelined runs keep at most one batch between the stages."""
    results: List[np.ndarray] = []
    with StagePipeline(model, cost_a, cost_b) as pipe:
        if not pipelined:
            return [pipe.score(records) for records in batches]
        in_b: Optional["Future[np.ndarray]"] = None
        for records in batches:
            encoded = pipe.submit_a(records)
            if in_b is not None:
                results.append(in_b.result())
            in_b = pipe.submit_b(encoded.result())
        if in_b is not None:
            results.append(in_b.result())
    log.debug(f"Scored {len(results)} batches, pipelined={pipelined}")
    return results
