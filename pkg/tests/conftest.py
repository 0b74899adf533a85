import numpy as np
import pytest
from hypothesis import settings

from qfiltctl.operators import SIGMA_MINUS, CouplingSet, DensityMatrix

settings.register_profile("default", deadline=None, max_examples=50)
settings.load_profile("default")

GROUND = DensityMatrix.basis(2, 0)
EXCITED = DensityMatrix.basis(2, 1)

# PASS/FAIL lines from the acceptance suite, repeated in the terminal summary.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


@pytest.fixture
def decay():
    """Qubit amplitude damping at unit rate, basis order (g, e)."""
    return CouplingSet(np.zeros((2, 2)), (SIGMA_MINUS,))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
