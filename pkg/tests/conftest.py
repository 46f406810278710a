import numpy as np
import pytest

from fedldi.datasets import gen_synthetic
from fedldi.numerics.rng import RngStream


def central_diff(f, x, step=1e-5):
    """Central finite differences of scalar ``f`` at flat array ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in range(x.size):
        orig = x[i]
        x[i] = orig + step
        fp = f(x)
        x[i] = orig - step
        fm = f(x)
        x[i] = orig
        g[i] = (fp - fm) / (2 * step)
    return g


def rel_error(a, b):
    """Relative error of two gradient vectors, ||a - b|| / (||a|| + ||b||)."""
    a, b = np.ravel(a), np.ravel(b)
    denom = np.linalg.norm(a) + np.linalg.norm(b)
    return float(np.linalg.norm(a - b) / denom) if denom > 0 else 0.0


@pytest.fixture(scope="session")
def small_pool():
    """A 10-class synthetic pool, 400 samples per class."""
    return gen_synthetic(10, 8, 400, 5.0, RngStream(123))


@pytest.fixture(scope="session")
def tiny_pool():
    return gen_synthetic(4, 3, 60, 6.0, RngStream(7))


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
