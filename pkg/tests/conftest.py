import numpy as np
import pytest
import torch

from dualdetr.config import RunConfig


def micro_config(**overrides) -> RunConfig:
    """Smallest model that still exercises every branch."""
    cfg = RunConfig.preset_config("tiny").override(
        model__d_model=16, model__enc_layers=1, model__dec_layers=2, model__num_queries=4,
        model__heads=2, model__points=2, model__num_classes=2, data__window=12)
    return cfg.override(**overrides).validate(check_paths=False)


def randomize(module: torch.nn.Module, seed: int = 0, scale: float = 0.3) -> torch.nn.Module:
    """Replace every parameter by Gaussian noise so zero-initialized paths carry signal."""
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(torch.randn(p.shape, generator=g, dtype=p.dtype) * scale)
    return module


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def micro_cfg():
    return micro_config()
