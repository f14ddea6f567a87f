"""Pure-Python/numpy implementations of the hot kernels.

These are the reference versions; ``_ckernels.pyx`` mirrors each function
with the same signature and results.
"""
from __future__ import annotations

import numpy as np


def elman_scan(xw: np.ndarray, wh: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Run h_t = tanh(xw_t + h_{t-1} @ wh) from h_0 = 0.

    Returns (H, Z) where Z holds the pre-activations.
    """
    T, d = xw.shape
    H = np.empty((T, d))
    Z = np.empty((T, d))
    h = np.zeros(d)
    for t in range(T):
        z = xw[t] + h @ wh
        Z[t] = z
        h = np.tanh(z)
        H[t] = h
    return H, Z


def elman_scan_backward(dH: np.ndarray, slope: np.ndarray, wh: np.ndarray) -> np.ndarray:
    """Back-propagate through the recurrence.

    ``slope`` is the per-element multiplier of the nonlinearity (1 - h**2 for
    ordinary gradients, the Rescale ratio for DeepLIFT). Returns dZ.
    """
    T, d = dH.shape
    dZ = np.empty((T, d))
    carry = np.zeros(d)
    for t in range(T - 1, -1, -1):
        dz = (dH[t] + carry) * slope[t]
        dZ[t] = dz
        carry = wh @ dz
    return dZ


def kendall_counts(a: np.ndarray, b: np.ndarray) -> tuple[float, int, int, int]:
    """Pair statistics for Kendall tau-b.

    Returns (concordant - discordant, pairs tied in a, pairs tied in b, n pairs).
    """
    n = a.shape[0]
    iu, ju = np.triu_indices(n, k=1)
    sa = np.sign(a[iu] - a[ju])
    sb = np.sign(b[iu] - b[ju])
    s = float(np.sum(sa * sb))
    return s, int(np.sum(sa == 0)), int(np.sum(sb == 0)), n * (n - 1) // 2


def nearest_distances(X: np.ndarray, block: int = 256) -> np.ndarray:
    """Euclidean distance from each row of X to its nearest other row."""
    n = X.shape[0]
    out = np.empty(n)
    for start in range(0, n, block):
        stop = min(start + block, n)
        diff = X[start:stop, None, :] - X[None, :, :]
        dist = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
        dist[np.arange(stop - start), np.arange(start, stop)] = np.inf
        out[start:stop] = dist.min(axis=1)
    return out
