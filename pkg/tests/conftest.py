"""Shared fixtures and the central finite-difference gradient oracle."""

import numpy as np
import pytest

from mevit.tensor import Tensor


def finite_difference_grad(fn, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar-valued fn at x."""
    x = x.copy()
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = fn(x)
        flat[i] = orig - h
        down = fn(x)
        flat[i] = orig
        gflat[i] = (up - down) / (2 * h)
    return grad


def check_gradient(build_loss, x: np.ndarray, h: float = 1e-5, tol: float = 1e-4) -> float:
    """Compare reverse-mode and central-difference gradients w.r.t. x.

    ``build_loss`` maps a Tensor to a scalar Tensor. Returns the relative
    error (L2), asserting it is below tol.
    """
    leaf = Tensor(x.copy(), requires_grad=True)
    build_loss(leaf).backward()
    analytic = leaf.grad.copy()
    numeric = finite_difference_grad(lambda arr: build_loss(Tensor(arr)).item(), x, h)
    scale = max(np.linalg.norm(numeric), 1e-8)
    rel = np.linalg.norm(analytic - numeric) / scale
    assert rel < tol, f"gradient mismatch: rel err {rel:.3e} >= {tol}"
    return rel


@pytest.fixture
def rng():
    return np.random.Generator(np.random.Philox(1234))
