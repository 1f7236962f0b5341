import numpy as np
import pytest

from hwnas import data as dt
from hwnas import space as sp

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def blobs_splits():
    ds = dt.synth_blobs(200, 16, 5, 6.0, seed=0)
    train, val, test = dt.split(ds, (0.6, 0.2, 0.2), seed=0)
    norm = dt.fit_normalizer(train)
    return norm.apply(train), norm.apply(val), norm.apply(test)


@pytest.fixture
def default_space():
    return sp.SearchSpaceConfig(input_dim=16, num_classes=5)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
