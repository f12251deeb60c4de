import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def benchmark_data():
    from wavemotif.benchmark import load_benchmark
    from wavemotif.data import generate_synthetic

    graph, roads, segments, spec = load_benchmark()
    return graph, generate_synthetic(spec, graph).matrix


@pytest.fixture(scope="session")
def small_problem():
    """Five-segment chain, eight days of 24 intervals, daily profile plus AR(1) noise."""
    from wavemotif.data import SpeedMatrix
    from wavemotif.roadgraph import DirectedRoadGraph

    rng = np.random.default_rng(7)
    n, per_day, days = 5, 24, 8
    graph = DirectedRoadGraph(n, frozenset({(0, 1), (1, 2), (2, 3), (3, 4), (0, 2)}))
    hours = np.arange(per_day)
    profile = 40 - 10 * np.exp(-0.5 * ((hours - 8) / 2.0) ** 2)
    noise = np.zeros((n, per_day * days))
    for t in range(1, noise.shape[1]):
        noise[:, t] = 0.5 * noise[:, t - 1] + rng.normal(0, 1.0, n)
    values = np.tile(profile, days)[None, :] + np.arange(n)[:, None] + noise
    return graph, SpeedMatrix(values, interval_minutes=60)


def small_config(**overrides):
    from wavemotif.config import RunConfig

    cfg = RunConfig()
    cfg.model.trend_window = 2
    cfg.model.period_window = 2
    cfg.model.hidden = 8
    cfg.model.filters = 4
    cfg.training.epochs = 3
    cfg.training.batch_size = 16
    cfg.training.dtype = "float64"
    cfg.wavelet.window = 30
    cfg.arma.max_p = 2
    cfg.arma.max_q = 1
    cfg.arma.residual_window = 32
    cfg.split.train_days = 6
    for key, value in overrides.items():
        cfg.override(key, str(value))
    return cfg.validate()


def pytest_terminal_summary(terminalreporter):
    lines = [value for reports in terminalreporter.stats.values() for rep in reports
             if getattr(rep, "when", None) == "call"
             for key, value in rep.user_properties if key == "acceptance"]
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
