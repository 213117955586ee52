import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from p2pgrid.config import load_config
from p2pgrid.network import load_network

settings.register_profile("p2pgrid", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "p2pgrid"))


@pytest.fixture(scope="session")
def net():
    return load_network()


@pytest.fixture(scope="session")
def cfg():
    return load_config()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("tests.test_acceptance")
    lines = getattr(mod, "REPORT", None)
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(lines):
        terminalreporter.write_line(lines[key])
