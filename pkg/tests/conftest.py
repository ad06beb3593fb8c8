import os

import numpy as np
import pytest

from midl.config import default_mnist_dir


def central_difference(f, x, eps=1e-5):
    """Numerical gradient of scalar ``f`` at array ``x`` (modified in place, restored)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        up = f()
        x[i] = old - eps
        dn = f()
        x[i] = old
        g[i] = (up - dn) / (2 * eps)
    return g


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return np.abs(a - b).max() / max(np.abs(a).max(), np.abs(b).max(), 1e-12)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def mnist_dir():
    d = default_mnist_dir()
    if not os.path.exists(os.path.join(d, "train-labels-idx1-ubyte.gz")) and not os.path.exists(
        os.path.join(d, "train-labels-idx1-ubyte")
    ):
        pytest.fail(
            f"MNIST IDX files not found in {d}; run scripts/prepare_mnist.py "
            "or set MIDL_MNIST_DIR"
        )
    return d


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE = {}


class Criterion:
    def __init__(self, number, title):
        self.number, self.title = number, title
        self.line = None

    def verdict(self, ok, detail):
        self.line = f"criterion {self.number:>2} {'PASS' if ok else 'FAIL'}: {self.title} | {detail}"
        ACCEPTANCE[self.number] = self.line
        print(self.line)
        assert ok, self.line


@pytest.fixture
def criterion(request):
    marker = request.node.get_closest_marker("criterion")
    c = Criterion(*marker.args)
    yield c
    if c.line is None:
        ACCEPTANCE[c.number] = f"criterion {c.number:>2} FAIL: {c.title} | raised before a verdict"


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
