import numpy as np
import pytest

from hiermem.model import ModelConfig, TransformerModel


@pytest.fixture
def tiny_model():
    """1-layer micro model for gradient checks; double precision throughout."""
    cfg = ModelConfig(vocab_size=24, d_model=8, n_layers=1, n_heads=2,
                      max_positions=64)
    return TransformerModel(cfg, seed=7)


@pytest.fixture
def small_model():
    cfg = ModelConfig(vocab_size=32, d_model=16, n_layers=2, n_heads=2,
                      max_positions=128)
    return TransformerModel(cfg, seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
