"""Forward/backward primitives for small convolutional networks (NCHW, float64)."""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def conv2d_forward(x, w, stride=1, padding=0):
    """Cross-correlation of ``(N, C, H, W)`` by ``(K, C, kh, kw)``; returns output and cache."""
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    n = x.shape[0]
    k, _, kh, kw = w.shape
    oh = (x.shape[2] - kh) // stride + 1
    ow = (x.shape[3] - kw) // stride + 1
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, : oh * stride : stride, : ow * stride : stride]
    # im2row: one contiguous row of C*kh*kw values per output position
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, -1)
    out = (cols @ w.reshape(k, -1).T).reshape(n, oh, ow, k).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(out), (x.shape, cols, stride, padding)


def conv2d_backward(dout, w, cache, need_dx=True):
    """Gradients w.r.t. input (None unless ``need_dx``) and weights."""
    xp_shape, cols, stride, padding = cache
    n, k, oh, ow = dout.shape
    _, c, kh, kw = w.shape
    d2 = dout.transpose(0, 2, 3, 1).reshape(-1, k)
    dw = (d2.T @ cols).reshape(w.shape)
    if not need_dx:
        return None, dw
    # (C*kh*kw, N*oh*ow) so every (i, j) slice reads whole output planes
    dcols = (w.reshape(k, -1).T @ d2.T).reshape(c, kh, kw, n, oh, ow)
    dxp = np.zeros(xp_shape)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + oh * stride:stride, j:j + ow * stride:stride] += \
                dcols[:, i, j].transpose(1, 0, 2, 3)
    if padding:
        dxp = dxp[:, :, padding:-padding, padding:-padding]
    return dxp, dw


def batchnorm_forward(x, gamma, beta, running_mean, running_var, train):
    """Per-channel batch normalization over (N, H, W). Updates running stats in place when training."""
    axes = (0, 2, 3)
    if train:
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        n = x.size // x.shape[1]
        running_mean *= 1 - BN_MOMENTUM
        running_mean += BN_MOMENTUM * mean
        running_var *= 1 - BN_MOMENTUM
        running_var += BN_MOMENTUM * var * n / max(n - 1, 1)
    else:
        mean, var = running_mean, running_var
    inv = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (x - mean[None, :, None, None]) * inv[None, :, None, None]
    out = gamma[None, :, None, None] * xhat + beta[None, :, None, None]
    return out, (xhat, inv, gamma, train)


def batchnorm_backward(dout, cache):
    xhat, inv, gamma, train = cache
    axes = (0, 2, 3)
    dgamma = (dout * xhat).sum(axis=axes)
    dbeta = dout.sum(axis=axes)
    dxhat = dout * gamma[None, :, None, None]
    if not train:
        return dxhat * inv[None, :, None, None], dgamma, dbeta
    m = dout.size // dout.shape[1]
    dx = (inv[None, :, None, None] / m) * (
        m * dxhat
        - dxhat.sum(axis=axes)[None, :, None, None]
        - xhat * (dxhat * xhat).sum(axis=axes)[None, :, None, None]
    )
    return dx, dgamma, dbeta


def maxpool_forward(x, size, stride):
    n, c, h, w = x.shape
    oh = (h - size) // stride + 1
    ow = (w - size) // stride + 1
    win = sliding_window_view(x, (size, size), axis=(2, 3))[:, :, : oh * stride : stride, : ow * stride : stride]
    flat = win.reshape(n, c, oh, ow, size * size)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    return out, (x.shape, arg, size, stride)


def maxpool_backward(dout, cache):
    shape, arg, size, stride = cache
    dx = np.zeros(shape)
    n, c, oh, ow = dout.shape
    di, dj = np.divmod(arg, size)
    rows = np.arange(oh)[None, None, :, None] * stride + di
    cols = np.arange(ow)[None, None, None, :] * stride + dj
    nn_, cc = np.meshgrid(np.arange(n), np.arange(c), indexing="ij")
    np.add.at(dx, (nn_[:, :, None, None], cc[:, :, None, None], rows, cols), dout)
    return dx


def softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy(logits, y):
    """Mean softmax cross-entropy and its gradient w.r.t. the logits."""
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = logits.shape[0]
    loss = -logp[np.arange(n), y].mean()
    grad = np.exp(logp)
    grad[np.arange(n), y] -= 1.0
    return float(loss), grad / n
