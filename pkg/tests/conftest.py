import math

import numpy as np
import pytest

from msfemlab.fem import CoefficientField, SourceField
from msfemlab.mesh import build_structured_coarse

EPS_DESK = math.pi / 50


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def periodic():
    return CoefficientField.paper_periodic(EPS_DESK, 100.0)


@pytest.fixture(scope="session")
def paper_f():
    return SourceField.paper_source()


@pytest.fixture(scope="session")
def coarse4():
    return build_structured_coarse(4)


def pytest_terminal_summary(terminalreporter):
    from tests import acceptance_log

    if acceptance_log.LINES:
        terminalreporter.section("acceptance criteria")
        for line in acceptance_log.LINES:
            terminalreporter.write_line(line)
