import numpy as np
import pytest

from omnixfer import numerics as nx


@pytest.fixture
def f64():
    with nx.precision("f64"):
        yield


@pytest.fixture
def rng():
    return nx.Rng(1234, "tests")


def naive_matmul(a, b):
    """Textbook triple loop in Python floats."""
    m, k = a.shape
    _, n = b.shape
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += float(a[i, t]) * float(b[t, j])
            out[i, j] = s
    return out


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance")
        for line in lines:
            terminalreporter.write_line(line)
