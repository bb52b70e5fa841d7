import numpy as np
import pytest

from koopctl.dynamics import make_system


@pytest.fixture
def decay():
    """Scalar ``xdot = -x`` with unit input gain."""
    return make_system("linear", {"A": [[-1.0]], "g": [1.0]})


@pytest.fixture
def diag2():
    """``xdot = diag(-1, -2) x`` with input on the second state."""
    return make_system("linear", {"A": [[-1.0, 0.0], [0.0, -2.0]]})


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    import sys

    lines = [line for name, mod in list(sys.modules.items())
             if name.endswith("test_acceptance") for line in getattr(mod, "LINES", [])]
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
