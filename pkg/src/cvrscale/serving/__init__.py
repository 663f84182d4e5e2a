"""Scoring server, batching, load generation and the serving simulator."""

from cvrscale.serving.batching import BatcherConfig, DynamicBatcher, SimClock, StageCost, dynamic_batch  # noqa: F401
from cvrscale.serving.client import ServeClient, client_batch  # noqa: F401
from cvrscale.serving.loadgen import LatencyReport, nearest_rank, run_loadgen  # noqa: F401
from cvrscale.serving.pipeline import StagePipeline, schedule_batches, stage_pipeline  # noqa: F401
from cvrscale.serving.server import ScoringServer, load_server_model  # noqa: F401
from cvrscale.serving.simulate import QpsSearch, peak_qps_search, simulate_load, simulate_serving  # noqa: F401
