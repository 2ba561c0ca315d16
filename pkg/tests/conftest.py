import numpy as np
import pytest

from xairefine import nn
from xairefine.config import config_from_dict
from xairefine.harness import run_experiment

ACCEPTANCE_LINES = []


def random_mlp(seed, dims, bias_scale=0.5):
    """Seeded MLP with non-zero biases; ``dims`` = [d, hidden..., K]."""
    rng = np.random.default_rng(seed)
    W = [rng.normal(0, 1.0 / np.sqrt(a), size=(b, a)) for a, b in zip(dims[:-1], dims[1:])]
    b = [rng.normal(0, bias_scale, size=k) for k in dims[1:]]
    return nn.ModelState(W, b)


def linear_model(W, b=None):
    W = np.asarray(W, dtype=float)
    b = np.zeros(W.shape[0]) if b is None else np.asarray(b, dtype=float)
    return nn.ModelState([W], [b])


def central_diff(f, x, h=1e-4):
    x = np.array(x, dtype=float)
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        orig = x[idx]
        x[idx] = orig + h
        up = f(x)
        x[idx] = orig - h
        down = f(x)
        x[idx] = orig
        g[idx] = (up - down) / (2 * h)
    return g


@pytest.fixture(scope="session")
def flagship():
    """The default planted-data experiment, seed 0 (computed once per session)."""
    return run_experiment(config_from_dict({"seed": 0}))


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
