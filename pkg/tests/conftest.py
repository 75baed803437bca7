import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(20240811)


def central_diff(f, x, h=1e-5):
    """Central finite-difference gradient of scalar/vector f at x (1-D array)."""
    x = np.asarray(x, dtype=float)
    f0 = np.asarray(f(x))
    grad = np.zeros(f0.shape + x.shape)
    for i in range(x.size):
        xp = x.copy()
        xm = x.copy()
        xp[i] += h
        xm[i] -= h
        grad[..., i] = (np.asarray(f(xp)) - np.asarray(f(xm))) / (2 * h)
    return grad


def rel_err(a, b, floor=1.0):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return np.linalg.norm(a - b) / max(float(np.linalg.norm(b)), floor)
