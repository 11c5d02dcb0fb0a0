from __future__ import annotations

import pytest

from dynkin_filter import vi_solver as vs
from dynkin_filter.model_core import validate_params

DESK = (0.08, 0.05, 0.3, 1.0, 0.1)
NEG_K = (0.05, 0.05, 0.3, 1.0, 0.1)
CASE1 = (0.08, 0.05, 0.3, 1.0, 2.0)
CASE4 = (0.08, 0.02, 0.3, 1.0, 0.1)


@pytest.fixture(scope="session")
def desk():
    return validate_params(*DESK)


@pytest.fixture(scope="session")
def neg_k():
    return validate_params(*NEG_K)


@pytest.fixture(scope="session")
def case1():
    return validate_params(*CASE1)


@pytest.fixture(scope="session")
def case4():
    return validate_params(*CASE4)


@pytest.fixture(scope="session")
def desk_surface(desk):
    return vs.solve(desk)


@pytest.fixture(scope="session")
def desk_boundaries(desk_surface):
    return vs.extract_boundaries(desk_surface)


@pytest.fixture(scope="session")
def neg_k_surface(neg_k):
    return vs.solve(neg_k)


@pytest.fixture(scope="session")
def neg_k_boundaries(neg_k_surface):
    return vs.extract_boundaries(neg_k_surface)


@pytest.fixture(scope="session")
def case1_surface(case1):
    return vs.solve(case1)


@pytest.fixture(scope="session")
def case4_surface(case4):
    return vs.solve(case4)


ACCEPTANCE_KEY = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[ACCEPTANCE_KEY] = []


@pytest.fixture(scope="session")
def acceptance_lines(request):
    """Collector for the one-line verdicts of the acceptance suite."""
    return request.config.stash[ACCEPTANCE_KEY]


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
