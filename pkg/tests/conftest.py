import numpy as np
import pytest
import torch

from gpunit.config import ModelConfig


@pytest.fixture(autouse=True)
def _fixed_torch_seed():
    torch.manual_seed(0)


@pytest.fixture
def tiny_cfg() -> ModelConfig:
    return ModelConfig(image_size=32, base_width=8, n_domains=3, style_dim=16)


def finite_difference_grads(fn, tensors, eps=1e-4):
    """Central finite differences of a scalar function, elementwise.

    ``fn`` takes no arguments and reads ``tensors`` by reference; each element
    is perturbed in place and restored.  This is the independent numeric
    oracle the analytic gradients are checked against.
    """
    grads = []
    with torch.no_grad():
        for t in tensors:
            grad = torch.zeros_like(t)
            flat, gflat = t.reshape(-1), grad.reshape(-1)
            for idx in range(flat.numel()):
                orig = flat[idx].item()
                flat[idx] = orig + eps
                f_plus = float(fn())
                flat[idx] = orig - eps
                f_minus = float(fn())
                flat[idx] = orig
                gflat[idx] = (f_plus - f_minus) / (2.0 * eps)
            grads.append(grad)
    return grads


def assert_grads_match(fn, tensors, rtol=1e-4, eps=1e-4):
    """Analytic (autograd) vs finite-difference gradients, float64 tensors.

    The error is normalized by the largest numeric-gradient magnitude so
    near-zero entries do not inflate the relative error.
    """
    for t in tensors:
        assert t.dtype == torch.float64, "gradient checks run at float64"
        t.grad = None
    value = fn()
    value.backward()
    analytic = [t.grad.clone() if t.grad is not None else torch.zeros_like(t)
                for t in tensors]
    numeric = finite_difference_grads(fn, tensors, eps=eps)
    for a, n in zip(analytic, numeric):
        scale = max(float(n.abs().max()), 1e-6)
        err = float((a - n).abs().max()) / scale
        assert err < rtol, f"gradient mismatch: rel err {err:.3e}"


def rand64(*shape, gen=None) -> torch.Tensor:
    g = gen if gen is not None else torch.Generator().manual_seed(7)
    return torch.randn(*shape, generator=g, dtype=torch.float64, requires_grad=True)
