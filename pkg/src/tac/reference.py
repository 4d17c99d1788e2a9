"""Brute-force oracles used by the test suite and ``verify``.

These deliberately avoid the packed-bit code paths: plain loops over dense
integer arrays, full sorts, and explicit products.
"""

from __future__ import annotations

import math

import numpy as np


def dense_conv2d(x: np.ndarray, w: np.ndarray, stride: int = 1, padding: int = 0,
                 pad_value: float = 0.0) -> np.ndarray:
    """Direct convolution (cross-correlation) of ``(C, H, W)`` by ``(K, C, kh, kw)``."""
    x, w = np.asarray(x), np.asarray(w)
    # exact integer arithmetic for ±1 inputs, float otherwise
    integral = all(np.array_equal(a, np.round(a)) for a in (x, w)) and float(pad_value).is_integer()
    x = x.astype(np.int64 if integral else np.float64)
    w = w.astype(x.dtype)
    c, h, wd = x.shape
    k, c2, kh, kw = w.shape
    assert c == c2
    xp = np.full((c, h + 2 * padding, wd + 2 * padding), pad_value, dtype=x.dtype)
    xp[:, padding:padding + h, padding:padding + wd] = x
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((k, oh, ow), dtype=np.result_type(x.dtype, w.dtype))
    for ko in range(k):
        for i in range(oh):
            for j in range(ow):
                patch = xp[:, i * stride:i * stride + kh, j * stride:j * stride + kw]
                out[ko, i, j] = (patch * w[ko]).sum()
    return out


def dense_matvec(w: np.ndarray, x: np.ndarray) -> np.ndarray:
    w = np.asarray(w)
    x = np.asarray(x)
    return np.array([sum(w[r, c] * x[c] for c in range(w.shape[1])) for r in range(w.shape[0])])


def sort_prune_mask(w: np.ndarray, rate: float) -> np.ndarray:
    """Keep-mask from a full sort of ``(|w|, flat index)`` pairs."""
    flat = np.asarray(w, dtype=np.float64).ravel()
    n = flat.size
    n_remove = math.floor(rate * n)
    order = sorted(range(n), key=lambda i: (abs(flat[i]), i))
    keep = np.ones(n, dtype=bool)
    keep[order[:n_remove]] = False
    return keep.reshape(np.shape(w))


def codebook_mse(values: np.ndarray, levels: np.ndarray) -> float:
    """Mean squared error of snapping each value to its nearest level."""
    values = np.asarray(values, dtype=np.float64)
    levels = np.asarray(levels, dtype=np.float64)
    d = (values[:, None] - levels[None, :]) ** 2
    return float(d.min(axis=1).mean())
