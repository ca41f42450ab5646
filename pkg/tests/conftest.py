import numpy as np
import pytest

from smpc import grid_dp, mpc, turnpike
from smpc.model import make_paper_example

ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def paper():
    return make_paper_example()


@pytest.fixture(scope="session")
def table16(paper):
    return grid_dp.backward_induction(paper, 16)


@pytest.fixture(scope="session")
def stationary(paper, table16):
    return turnpike.estimate_stationary(paper, x0=3.0, N_long=15, table=table16)


@pytest.fixture(scope="session")
def mc_paper(paper, table16, stationary):
    """Monte-Carlo closed loop for N = 3, 4, 5 with M = 1000, K = 100."""
    return {N: mpc.monte_carlo(paper, mpc.GridPolicy(table16, N), 3.0, 100, 1000, seed=0,
                               stationary_cost=stationary.stationary_cost)
            for N in (3, 4, 5)}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
