import numpy as np
import pytest
from hypothesis import HealthCheck, settings

import acceptance_log
from modewatch.mixture import GaussianComponent, MixtureModel

settings.register_profile(
    "default", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


@pytest.fixture
def two_mode_log():
    """Log-domain two-mode model used across detector tests."""
    return MixtureModel(
        (0.44, 0.56), (GaussianComponent(0.0, 0.5), GaussianComponent(1.0, 0.5)), "log"
    )


@pytest.fixture
def post_log():
    return MixtureModel((1.0,), (GaussianComponent(1.75, 0.5),), "log")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if acceptance_log.LINES:
        terminalreporter.section("acceptance criteria")
        for line in acceptance_log.LINES:
            terminalreporter.write_line(line)
