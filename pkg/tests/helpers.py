"""Shared oracles: central finite differences and naive reference computations."""

import numpy as np


def central_diff(f, x, h=1e-6):
    """Central finite-difference gradient of scalar f at array x."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gf[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-300)
    return np.linalg.norm(a - b) / denom


def naive_matmul(x, W):
    """Triple-loop matrix product oracle."""
    n, k = x.shape
    k2, m = W.shape
    assert k == k2
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            acc = 0.0
            for t in range(k):
                acc += x[i, t] * W[t, j]
            out[i, j] = acc
    return out


def nearest_level_reconstruct(values, scale, levels):
    """Independent nearest-level codec: argmin |v/s - q| then q * s."""
    v = np.asarray(values, dtype=np.float64).reshape(-1)
    q = np.asarray(levels, dtype=np.float64)
    idx = np.argmin(np.abs(v[:, None] / scale - q[None, :]), axis=1)
    return q[idx] * scale
