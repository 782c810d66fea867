import numpy as np
import pytest

from hmfpc.basis import build_basis


def pytest_configure(config):
    np.set_printoptions(precision=6, suppress=True)


@pytest.fixture(scope="session")
def unit_basis():
    """Ten orthonormal cubic splines on [0, 1] with uneven knots."""
    rng = np.random.default_rng(11)
    times = np.r_[0.0, 1.0, rng.beta(2, 3, 200)]
    return build_basis(times, 10)


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE_LINES

    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
