import numpy as np
import pytest
import torch

from genclass.diffusion.denoiser import ConditionedDenoiser, DenoiserConfig
from genclass.diffusion.schedule import build_schedule


@pytest.fixture
def small_schedule():
    return build_schedule(10, "linear_beta", beta_start=0.01, beta_end=0.2)


@pytest.fixture
def tiny_model():
    """Small random-weight denoiser for 16x16 single-channel inputs."""
    torch.manual_seed(0)
    cfg = DenoiserConfig(
        channels=1, image_size=16, base_channels=8, channel_mults=(1, 2),
        blocks_per_level=1, cond_rows=4, cond_cols=4, emb_dim=32,
    )
    model = ConditionedDenoiser(cfg)
    model.eval()
    return model


class OracleModel(torch.nn.Module):
    """Stub that returns a fixed callable of its inputs; not trainable."""

    def __init__(self, fn, config=None):
        super().__init__()
        self.fn = fn
        self.config = config or DenoiserConfig(
            channels=1, image_size=8, cond_rows=2, cond_cols=2
        )

    def forward(self, z_t, t, cond):
        return self.fn(z_t, t, cond)


@pytest.fixture
def zero_model():
    return OracleModel(lambda z, t, c: torch.zeros_like(z))


def seeded_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(seed)
