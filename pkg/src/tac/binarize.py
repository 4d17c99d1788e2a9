"""Sign binarization, per-filter scaling and the clipped straight-through gradient."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array

from .tensor import BitTensor, as_tensor, from_bits, unpack


def sign(x) -> np.ndarray:
    """Dense ±1 sign with ``sign(0) == +1``."""
    return np.where(np.asarray(x) >= 0, 1.0, -1.0)


def sign_binarize(t) -> BitTensor:
    """Binarize a tensor: +1 where ``t >= 0``, -1 elsewhere."""
    arr = as_tensor(t)
    return from_bits(arr >= 0)


def compute_scale(filt) -> float:
    """Mean absolute value of a filter's weights."""
    arr = as_tensor(filt)
    if arr.size == 0:
        raise ValueError("cannot compute the scale of an empty filter")
    return float(np.abs(arr).mean())


def channel_scales(weights) -> np.ndarray:
    """Per-output-channel scale for a weight array whose first axis is channels."""
    w = as_tensor(weights)
    if w.ndim == 0 or w.size == 0:
        raise ValueError("cannot compute scales of an empty weight array")
    return np.abs(w.reshape(w.shape[0], -1)).mean(axis=1)


def ste_backward(upstream_grad, preactivation) -> np.ndarray:
    """Clipped straight-through gradient of ``sign``.

    The upstream gradient passes unchanged where ``|preactivation| <= 1`` and is
    zeroed elsewhere.
    """
    g = np.asarray(upstream_grad, dtype=np.float64)
    x = np.asarray(preactivation, dtype=np.float64)
    if g.shape != x.shape:
        raise ValueError(f"shape mismatch: grad {g.shape} vs preactivation {x.shape}")
    return np.where(np.abs(x) <= 1.0, g, 0.0)


@dataclass(frozen=True, eq=False)
class BinarizedFilterBank:
    """Sign bits of a weight array plus one scale per output channel.

    ``bits`` has shape ``[out, ...]`` (``[out, in, kh, kw]`` for convolutions,
    ``[out, in]`` for linear layers). ``alpha`` has length ``out``; a bank built
    without scaling carries all-ones alpha.
    """

    bits: BitTensor
    alpha: np.ndarray

    def __post_init__(self):
        alpha = np.array(self.alpha, dtype=np.float64).ravel()
        if not self.bits.shape:
            raise ValueError("filter bank needs at least one axis")
        if alpha.shape != (self.bits.shape[0],):
            raise ValueError(
                f"alpha has {alpha.size} entries for {self.bits.shape[0]} output channels"
            )
        if np.any(alpha < 0) or not np.all(np.isfinite(alpha)):
            raise ValueError("alpha must be finite and non-negative")
        alpha.flags.writeable = False
        object.__setattr__(self, "alpha", alpha)

    @property
    def shape(self) -> tuple:
        return self.bits.shape

    @property
    def out_channels(self) -> int:
        return self.bits.shape[0]

    @property
    def fan_in(self) -> int:
        return self.bits.logical_len // max(self.out_channels, 1)

    def dense(self) -> np.ndarray:
        """Dense ±1 weights (without alpha)."""
        return unpack(self.bits)

    @classmethod
    def from_weights(cls, weights, scale: bool = True) -> "BinarizedFilterBank":
        w = as_tensor(weights)
        alpha = channel_scales(w) if scale else np.ones(w.shape[0])
        return cls(sign_binarize(w), alpha)


class SignBinarizer(TransformerMixin, BaseEstimator):
    """Stateless transformer mapping features to ±1 with ``sign(0) = +1``.

    Parameters
    ----------
    scale : bool, default=False
        If True, multiply each row by its mean absolute value, which is how
        filter weights are binarized.
    """

    def __init__(self, scale=False):
        self.scale = scale

    def fit(self, X, y=None):
        X = check_array(X)
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        X = check_array(X)
        out = sign(X)
        if self.scale:
            out = out * np.abs(X).mean(axis=1, keepdims=True)
        return out

    def __sklearn_tags__(self):
        tags = super().__sklearn_tags__()
        tags.requires_fit = False
        return tags
