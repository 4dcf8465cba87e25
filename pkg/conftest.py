"""
Shared pytest setup: src/ on the path, a `slow` marker for the acceptance sweeps and a
few small datasets reused across test modules.
"""
import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "src"))

from client import ClientShard  # noqa: E402
from models import ForestConfig  # noqa: E402


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running acceptance sweeps (run with --runslow)")


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run slow acceptance sweeps")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


def make_shards(n_clients=3, n_rows=40, d=3, seed=0, shift=0.0):
    rng = np.random.default_rng(seed)
    shards = []
    for k in range(n_clients):
        X = rng.normal(loc=shift * k, size=(n_rows, d))
        y = 2.0 * (X[:, 0] > 0) + X[:, 1] + 0.1 * rng.normal(size=n_rows)
        shards.append(ClientShard(k, X, y))
    return shards


@pytest.fixture
def shards():
    return make_shards()


@pytest.fixture
def small_config():
    return ForestConfig(trees=3, max_depth=3, min_leaf=2, mtry=3, sketch_size=8, seed=7)
