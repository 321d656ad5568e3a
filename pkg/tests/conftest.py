"""Shared fixtures: tiny configs sized for fast, deterministic tests."""

import numpy as np
import pytest

from adaptlab.adapters import AdapterConfig
from adaptlab.data import CorpusSpec, generate
from adaptlab.encoder import EncoderConfig


@pytest.fixture
def gen():
    return np.random.default_rng(12345)


@pytest.fixture
def tiny_encoder():
    return EncoderConfig(num_layers=2, model_dim=16, inner_dim=32, num_heads=2,
                         feature_dim=5, max_seq_len=64)


@pytest.fixture
def tiny_adapter():
    return AdapterConfig(variant="multiconv", kernels=(3, 7), bottleneck=8)


@pytest.fixture(scope="session")
def small_corpus():
    """120 records at reduced frame count; shared across test modules."""
    return generate(CorpusSpec(seed=11, num_records=120, frames=64, features=6))
