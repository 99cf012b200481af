import os

import numpy as np
import pytest

from adlm.data import fit_bounds, load_mnist, scale_features

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
MNIST_DIR = os.path.join(ROOT, "data", "mnist-10k")


def central_difference(f, x, step=1e-5):
    """Central finite-difference gradient of scalar ``f`` w.r.t. array ``x`` (modified in place, restored)."""
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + step
        up = f()
        flat[i] = old - step
        down = f()
        flat[i] = old
        gflat[i] = (up - down) / (2 * step)
    return g


def grad_close(analytic, numeric, rtol=1e-5, atol=1e-8):
    a, n = np.asarray(analytic), np.asarray(numeric)
    diff = np.abs(a - n)
    scale = np.maximum(np.abs(a), np.abs(n))
    ok = (diff <= atol) | (diff < rtol * scale)
    return bool(ok.all()), float(np.max(np.where(diff <= atol, 0.0, diff / np.maximum(scale, 1e-300)), initial=0.0))


@pytest.fixture(scope="session")
def mnist():
    """Scaled ``(train, test)`` of the bundled MNIST subset."""
    train = load_mnist(MNIST_DIR, "train")
    test = load_mnist(MNIST_DIR, "test")
    bounds = fit_bounds(train)
    return scale_features(train, bounds), scale_features(test, bounds)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES = {}


@pytest.fixture
def report():
    """Record the one-line verdict of an acceptance criterion."""
    def record(number, passed, detail):
        line = f"CRITERION {number}: {'PASS' if passed else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES[number] = line
        print(line)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
