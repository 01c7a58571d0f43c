"""
共通フィクスチャ
"""

import sys
from pathlib import Path

import numpy as np
import pytest

ROOT = Path(__file__).resolve().parent.parent
sys.path.insert(0, str(ROOT))

from core.profiler import ProfilerModel  # noqa: E402
from core.scenario import Scenario, ScenarioSpec, generate_scenario  # noqa: E402
from core.types import QualityPalette  # noqa: E402


def pytest_addoption(parser):
    parser.addoption("--update-golden", action="store_true", default=False,
                     help="tests/golden の期待出力を現在の結果で書き換える")


ENV_KEYS = (
    "HYPERION_LATENCY_BUDGET_MS",
    "HYPERION_DEVICE_LATENCY_MS",
    "HYPERION_CLOUD_LATENCY_MS",
    "HYPERION_RETURN_LATENCY_MS",
    "HYPERION_BANDWIDTH_WINDOW",
    "HYPERION_BOOTSTRAP_BANDWIDTH_MBPS",
    "HYPERION_DP_SCALE",
    "HYPERION_SEED",
    "HYPERION_LOG",
)


@pytest.fixture(autouse=True)
def clean_env(monkeypatch):
    """環境変数による既定値の上書きを無効化"""
    for key in ENV_KEYS:
        monkeypatch.delenv(key, raising=False)


@pytest.fixture
def palette() -> QualityPalette:
    return QualityPalette()


@pytest.fixture
def linear_model() -> ProfilerModel:
    return ProfilerModel(alpha=0.01, alpha_s=0.05, betas=(0.001, 0.004, 0.01), beta_a=0.02)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def default_scenario() -> Scenario:
    return generate_scenario(ScenarioSpec(), seed=42)


@pytest.fixture(scope="session")
def small_scenario() -> Scenario:
    return generate_scenario(ScenarioSpec(num_frames=16), seed=7)


@pytest.fixture(scope="session")
def two_phase_scenario() -> Scenario:
    return generate_scenario(ScenarioSpec(num_frames=40), seed=42)
