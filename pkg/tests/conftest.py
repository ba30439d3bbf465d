import numpy as np
import pytest
import torch

from trimae.model import ModelConfig, TriModalAutoencoder

# Toy geometry shared across the suite: 16 audio patches (8x2 grid) and
# 16 visual patches (4x4 grid) at width 16.
TOY_CONFIG = dict(
    d=16,
    d_t=8,
    encoder_depth=1,
    cross_depth=1,
    decoder_depth=1,
    heads=2,
    audio_shape=(32, 16),
    frame_shape=(16, 16, 3),
    audio_patch=(4, 8),
    visual_patch=(4, 4),
)


@pytest.fixture
def toy_config() -> ModelConfig:
    return ModelConfig(**TOY_CONFIG)


@pytest.fixture
def toy_model(toy_config) -> TriModalAutoencoder:
    return TriModalAutoencoder(toy_config).double()


def zero_all_parameters(model: torch.nn.Module) -> None:
    """Residual paths only: every learnable weight and bias becomes zero."""
    with torch.no_grad():
        for p in model.parameters():
            p.zero_()


def fd_grad(fn, x: torch.Tensor, h: float = 1e-6) -> torch.Tensor:
    """Central finite differences of a scalar-valued fn() wrt x, in place."""
    grad = torch.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = float(flat[i])
            flat[i] = orig + h
            f_plus = float(fn())
            flat[i] = orig - h
            f_minus = float(fn())
            flat[i] = orig
            gflat[i] = (f_plus - f_minus) / (2.0 * h)
    return grad


def rel_error(analytic: torch.Tensor, numeric: torch.Tensor) -> float:
    denom = max(float(torch.linalg.vector_norm(numeric)), 1e-10)
    return float(torch.linalg.vector_norm(analytic - numeric)) / denom


def unit_rows(rng: np.random.Generator, b: int, d: int) -> torch.Tensor:
    x = rng.standard_normal((b, d))
    return torch.from_numpy(x / np.linalg.norm(x, axis=1, keepdims=True))
