"""Central finite-difference oracle shared by the gradient-check tests."""

import numpy as np


def numeric_grad(f, x, eps=1e-5, indices=None):
    """d f / d x by central differences; ``x`` is perturbed in place and restored."""
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size) if indices is None else indices:
        old = flat[i]
        flat[i] = old + eps
        fp = f()
        flat[i] = old - eps
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * eps)
    return grad


def rel_error(analytic, numeric):
    """Norm-wise relative error max|a - n| / max|n|."""
    scale = max(np.max(np.abs(numeric)), 1e-12)
    return float(np.max(np.abs(analytic - numeric)) / scale)
