import warnings

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from powertrack.model import PlantParams, build_model, default_model

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def model():
    return default_model(0.02)


@pytest.fixture
def stationary_model():
    return default_model(0.0)


def single_plant_model(a_open=1.1, a_closed=0.0, noise_var=1.0, p_max=10.0, budget=5.0):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return build_model([PlantParams(a_open, a_closed, noise_var)], p_max, budget)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[ACCEPTANCE] = []


@pytest.fixture
def acceptance(request):
    """Record one pass/fail line per acceptance criterion."""
    lines = request.config.stash[ACCEPTANCE]

    def record(number, ok, detail):
        lines.append((number, f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"))
        return ok

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
