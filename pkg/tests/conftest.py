import os
import sys

sys.path.append(os.path.abspath(os.path.join(os.path.dirname(__file__), "..")))

from pathlib import Path

import pytest

from pair_absa.checks import micro_config
from pair_absa.data import parse_dataset

DATA_DIR = Path(__file__).resolve().parent.parent / "data" / "toy"


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run slow tests")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running training checks")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def data_dir():
    return DATA_DIR


@pytest.fixture
def toy_train():
    return parse_dataset(DATA_DIR / "train.txt")


@pytest.fixture
def toy_dev():
    return parse_dataset(DATA_DIR / "dev.txt")


@pytest.fixture
def micro():
    return micro_config()


@pytest.fixture
def tiny():
    """Small single-layer config that trains in well under a second per step."""
    return micro_config(n_layers=1, directions="bi", max_positions=32)
