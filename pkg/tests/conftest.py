"""
Shared fixtures for the ts3codec test suite.
Numerical checks run in float64 on small configurations.
"""

import os
import sys

import numpy as np
import pytest
import torch

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from core.model import CodecConfig, TS3Codec  # noqa: E402
from core.xformer import TransformerConfig  # noqa: E402


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run tests marked slow")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


def make_micro_config(window: int = 4, num_layers: int = 2, codebook_size: int = 64) -> CodecConfig:
    return CodecConfig(
        config_id="custom",
        frame_size=16,
        encoder_mid_dim=24,
        encoder_out_dim=16,
        decoder_in_dim=16,
        decoder_mid_dim=24,
        transformer=TransformerConfig(num_layers=num_layers, embed_dim=16, num_heads=2, ffn_dim=32,
                                      window=window),
        codebook_size=codebook_size,
        codebook_dim=4,
    )


@pytest.fixture
def micro_config():
    return make_micro_config()


@pytest.fixture
def micro_model(micro_config):
    torch.manual_seed(0)
    return TS3Codec(micro_config).double().eval()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
