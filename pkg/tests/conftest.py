import numpy as np
import pytest

from taylorformer import tensor


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False,
                     help="run the long acceptance experiments")


def pytest_configure(config):
    config.addinivalue_line("markers",
                            "slow: long-running experiment, needs --runslow")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def rng():
    return np.random.default_rng(42)


@pytest.fixture(autouse=True)
def f64():
    "Every test starts in 64-bit precision and leaves it that way."
    with tensor.precision("f64"):
        yield
