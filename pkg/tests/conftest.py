"""Shared fixtures: a small geometry that keeps every forward pass cheap."""
import numpy as np
import pytest
import torch

from srtext import DegradeParams, ModelConfig, generate_dataset

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def tiny_cfg() -> ModelConfig:
    """Smallest valid geometry: 8x32 LR images, thin features, one encoder
    block per stage."""
    return ModelConfig(
        iterations=2,
        height=8,
        width=32,
        hidden_channels=8,
        token_dim=16,
        encoder_heads=2,
        encoder_depth=1,
    )


@pytest.fixture(scope="session")
def tiny_dataset(tiny_cfg):
    return generate_dataset(4, 7, tiny_cfg, DegradeParams(), min_len=2, max_len=4)


@pytest.fixture()
def rng() -> np.random.Generator:
    return np.random.default_rng(0)
