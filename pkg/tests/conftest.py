import sys
import time
from contextlib import contextmanager
from pathlib import Path

import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).parent))

from prefixquant.model import ModelConfig, init_random_model  # noqa: E402
from prefixquant.tensor import make_rng  # noqa: E402

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

SMALL = ModelConfig(n_layers=2, hidden=64, n_heads=2, head_dim=32, intermediate=128, max_seq=128)

_CRITERIA: dict[int, tuple[str, str, float]] = {}


@contextmanager
def criterion(number: int, title: str, budget: float):
    """Time an acceptance criterion, enforce its runtime budget and record the verdict."""
    t0 = time.perf_counter()
    try:
        yield
        elapsed = time.perf_counter() - t0
        assert elapsed < budget, f"runtime {elapsed:.1f}s exceeds {budget:.0f}s"
    except BaseException:
        _CRITERIA[number] = (title, "FAIL", time.perf_counter() - t0)
        raise
    _CRITERIA[number] = (title, "PASS", elapsed)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        title, verdict, secs = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n}: {verdict}  {title}  ({secs:.1f}s)")


@pytest.fixture(scope="session")
def small_model():
    return init_random_model(SMALL, make_rng(0))


@pytest.fixture(scope="session")
def default_model():
    return init_random_model(ModelConfig(), make_rng(0))
