"""
Shared pytest fixtures and numerical helpers.

Run the whole suite with:
    PYTHONPATH=. pytest -q tests/
"""

import os

os.environ.setdefault("FEDSIM_QUIET", "1")

import numpy as np
import pytest

from selftest import toy_bundle, toy_model, toy_samples  # noqa: F401  shared toy fixtures


def numerical_grad(f, x: np.ndarray, h: float = 1e-5, indices=None) -> np.ndarray:
    """Central differences of scalar f at x (optionally only at the given flat indices)."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in (range(flat.size) if indices is None else indices):
        keep = flat[i]
        flat[i] = keep + h
        up = f(x)
        flat[i] = keep - h
        down = f(x)
        flat[i] = keep
        gflat[i] = (up - down) / (2.0 * h)
    return grad


def rel_err(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-300)
    return float(np.linalg.norm(a - b) / scale)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_model():
    return toy_model()
