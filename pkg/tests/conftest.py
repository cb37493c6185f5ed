import numpy as np
import pytest

from fedforget.core import Rng
from fedforget.dataset import load_uci, prepare
from fedforget.model import init_params
from fedforget.synthetic import write_synthetic_uci

SMALL_COUNTS = (172, 154, 140, 177, 190, 194)

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def small_uci_dir(tmp_path_factory):
    return write_synthetic_uci(tmp_path_factory.mktemp("uci_small"), SMALL_COUNTS, seed=11)


@pytest.fixture(scope="session")
def small_raw(small_uci_dir):
    return load_uci(small_uci_dir)


@pytest.fixture(scope="session")
def small_prepared(small_raw):
    return prepare(small_raw, Rng(0))


@pytest.fixture
def tiny_params():
    return init_params(Rng(3), n_filters=4, n_hidden=8)


@pytest.fixture
def rng():
    return Rng(12345)


def random_batch(rng, n, window=128, channels=6):
    x = rng.normal((n, window, channels))
    y = (rng.uniform(n) * 6).astype(np.int64)
    return x, y


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
