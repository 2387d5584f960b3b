import json
import logging

import pytest
import torch

from core.config import config_from_dict
from core.world import generate_synthetic_world

TINY = {
    "seed": 0,
    "seeds": [0, 1],
    "epochs": 2,
    "decay_every": 1,
    "batch_dfer": 6,
    "batch_au": 8,
    "frames": 4,
    "d_raw": 6,
    "d": 8,
    "context_length": 2,
    "eval_batch": 16,
    "moe": {"num_experts": 4, "top_k": 2, "d_hidden": 6},
    "temporal": {"heads": 1, "ffn_hidden": 8},
    "text_encoder": {"d_tok": 8, "vocab_size": 512},
    "world": {"fe_samples": 28, "au_samples": 32, "cross_samples": 8},
}


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run slow empirical tests")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long empirical runs, enabled with --runslow")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture(autouse=True)
def _quiet_logging():
    logging.getLogger().setLevel(logging.WARNING)
    torch.set_num_threads(1)


def tiny_config(**overrides):
    data = dict(TINY)
    data.update(overrides)
    return config_from_dict(data)


@pytest.fixture
def config():
    return tiny_config()


@pytest.fixture
def world(config):
    return generate_synthetic_world(config.world, config.seed)


@pytest.fixture
def make_config():
    return tiny_config


@pytest.fixture
def write_config(tmp_path):
    def write(**overrides):
        data = dict(TINY)
        data.update(overrides)
        path = tmp_path / "config.json"
        path.write_text(json.dumps(data, indent=2), encoding="utf-8")
        return str(path)
    return write
