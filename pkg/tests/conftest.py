import numpy as np
import pytest

from velora.config import RunConfig
from velora.events import gen_synthetic
from velora.rng import make_rng

TINY = dict(image=16, patch=4, dim=16, depth=2, heads=2, mlp_ratio=2, frames=4, clips=16, batch=4, seed=3)


@pytest.fixture(scope="session")
def tiny_run():
    return RunConfig(**TINY)


@pytest.fixture(scope="session")
def tiny_clips():
    return gen_synthetic(8, 4, 16, 16, 4, make_rng(11, "clips"))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
