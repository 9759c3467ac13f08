import numpy as np
import pytest

from patientmesh.body_model import make_mini_model
from patientmesh.synthgen import build_pose_bank


@pytest.fixture(scope="session")
def mini():
    return make_mini_model(7)


@pytest.fixture(scope="session")
def small_bank(mini):
    return build_pose_bank("procedural", seed=0, n=200, model=mini)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def acceptance_log():
    """Record one summary line per acceptance criterion; the lines are
    echoed immediately and again in the terminal summary."""
    def record(number, title, passed, detail):
        line = f"[{'PASS' if passed else 'FAIL'}] criterion {number:>2}: {title} -- {detail}"
        ACCEPTANCE_LINES.append((number, line))
        print(line, flush=True)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
