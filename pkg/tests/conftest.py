import numpy as np
import pytest

from cgolab.config import ExperimentConfig
from cgolab.mdp import ContextualMdp
from cgolab.pipeline import build_env, generate_data

LEFT, RIGHT = 0, 1


def make_chain(gamma: float = 0.9) -> ContextualMdp:
    """s0 -> s1 -> s2 with left/right moves, goal {s2}, start s0."""
    P = np.zeros((3, 2, 3))
    for s in range(3):
        P[s, LEFT, max(s - 1, 0)] = 1.0
        P[s, RIGHT, min(s + 1, 2)] = 1.0
    goal = np.array([[False, False, True]])
    d0 = np.zeros((3, 1))
    d0[0, 0] = 1.0
    return ContextualMdp(P, goal, gamma, d0, name="chain")


@pytest.fixture
def chain():
    return make_chain()


@pytest.fixture(scope="session")
def medium_env():
    return build_env(ExperimentConfig())


@pytest.fixture(scope="session")
def medium_data(medium_env):
    return generate_data(ExperimentConfig(), medium_env, 0)


ACCEPTANCE_LINES: list = []


@pytest.fixture
def verdict():
    """Record a one-line acceptance verdict, then fail the test if it is red."""

    def record(number: int, ok: bool, detail: str) -> None:
        ACCEPTANCE_LINES.append(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}")
        assert ok, detail

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
