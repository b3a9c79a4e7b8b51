import pytest
import torch

torch.set_num_threads(2)


@pytest.fixture
def tiny_arch():
    from cagan.networks import ArchitectureConfig

    return ArchitectureConfig(image_size=32, channels=1, L=4, M=4)


@pytest.fixture
def tiny_prior():
    from cagan.latent import PriorConfig

    return PriorConfig(L=4, M=4)


def central_difference(fn, x: torch.Tensor, h: float = 1e-5) -> torch.Tensor:
    """Independent finite-difference gradient of a scalar function of x."""
    grad = torch.zeros_like(x)
    flat = x.view(-1)
    gflat = grad.view(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + h
        hi = float(fn())
        flat[i] = orig - h
        lo = float(fn())
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * h)
    return grad


def relative_error(a: torch.Tensor, b: torch.Tensor) -> float:
    denom = max(float(a.abs().max()), float(b.abs().max()), 1e-12)
    return float((a - b).abs().max()) / denom
