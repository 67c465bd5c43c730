import numpy as np
import pytest

from grokwl.modular_tasks import TaskKind, TaskSpec, make_split
from grokwl.transformer import Batch, ModelConfig


def central_difference(f, x, idx, h=1e-5):
    """Central finite difference of scalar ``f`` along flat coordinate ``idx``."""
    xp = x.copy()
    xm = x.copy()
    xp.flat[idx] += h
    xm.flat[idx] -= h
    return (f(xp) - f(xm)) / (2 * h)


def rel_err(a, b):
    return abs(a - b) / max(abs(a), abs(b), 1e-300)


@pytest.fixture(scope="session")
def tiny_split():
    return make_split(TaskSpec(TaskKind.ADD, 7), 0)


@pytest.fixture(scope="session")
def tiny_model():
    return ModelConfig(p=7, d_model=8, n_heads=2, d_head=4, d_mlp=16)


@pytest.fixture(scope="session")
def tiny_batches(tiny_split):
    return Batch.from_split(tiny_split, "train"), Batch.from_split(tiny_split, "test")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import sys

    lines = []
    for name, mod in list(sys.modules.items()):
        if name.rsplit(".", 1)[-1] == "test_acceptance":
            lines = getattr(mod, "RESULTS", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
