"""
テスト用の小さな組み立て関数
"""

from typing import List, Tuple

from config.config import SimConfig
from core.profiler import ProfilerModel
from core.scenario import Scenario
from core.types import FrameMeta


def make_meta(frame_id: int = 0, rows: int = 2, cols: int = 2, patch: int = 10,
              size: int = 1_000_000) -> FrameMeta:
    return FrameMeta(frame_id, rows, cols, patch, size)


def constant_trace(bandwidth_mbps: float, end_ms: float = 1e7) -> List[Tuple[float, float]]:
    return [(0.0, bandwidth_mbps), (end_ms, bandwidth_mbps)]


def truth_model(scenario: Scenario) -> ProfilerModel:
    spec = scenario.spec
    return ProfilerModel(spec.size_alpha, spec.size_alpha_s, spec.acc_betas, spec.acc_beta_a)


def base_config(**kwargs) -> SimConfig:
    values = dict(
        latency_budget_ms=400.0,
        device_latency_ms=150.0,
        cloud_latency_ms=100.0,
        return_latency_ms=0.0,
        bandwidth_window=5,
        bootstrap_bandwidth_mbps=50.0,
        dp_scale=1000,
        rng_seed=42,
    )
    values.update(kwargs)
    return SimConfig(**values)
