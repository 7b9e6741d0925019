import os
import sys

import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, os.path.dirname(__file__))

from helpers import COMPLETE3, DEGENERATE, GAUSSIAN, NONDEGENERATE, TWO_STATE_C21  # noqa: E402
from switchdiff.model import build_model  # noqa: E402

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def degenerate():
    return build_model(DEGENERATE)


@pytest.fixture(scope="session")
def gaussian():
    return build_model(GAUSSIAN)


@pytest.fixture(scope="session")
def nondegenerate():
    return build_model(NONDEGENERATE)


@pytest.fixture(scope="session")
def two_state():
    return build_model(TWO_STATE_C21)


@pytest.fixture(scope="session")
def complete3():
    return build_model(COMPLETE3)


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance: end-to-end acceptance criteria (slow)")


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE_LINES

    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
