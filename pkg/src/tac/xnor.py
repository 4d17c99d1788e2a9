"""XNOR + popcount kernels for binarized convolution and matrix products.

A ±1 dot product of length ``n`` equals ``n - 2 * popcount(a XOR w)``: every
disagreeing position contributes -1 instead of +1. All accumulation is done in
integers; the per-channel scale is the only floating multiply per output.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .binarize import BinarizedFilterBank
from .tensor import WORD_BITS, BitTensor, n_words, pack_bits, popcount

# rows of the im2row matrix processed per XOR block
_BLOCK_ROWS = 2048


@dataclass(frozen=True)
class ConvGeometry:
    in_channels: int
    out_channels: int
    kernel_h: int
    kernel_w: int
    input_h: int
    input_w: int
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        for name in ("in_channels", "out_channels", "kernel_h", "kernel_w", "stride"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.padding < 0:
            raise ValueError(f"padding must be non-negative, got {self.padding}")
        if self.input_h < 1 or self.input_w < 1:
            raise ValueError("input dims must be positive")
        if self.output_h < 1 or self.output_w < 1:
            raise ValueError(
                f"kernel {self.kernel_h}x{self.kernel_w} does not fit input "
                f"{self.input_h}x{self.input_w} with padding {self.padding}"
            )

    @property
    def output_h(self) -> int:
        return (self.input_h + 2 * self.padding - self.kernel_h) // self.stride + 1

    @property
    def output_w(self) -> int:
        return (self.input_w + 2 * self.padding - self.kernel_w) // self.stride + 1

    @property
    def kernel_volume(self) -> int:
        return self.in_channels * self.kernel_h * self.kernel_w

    @property
    def input_shape(self) -> tuple:
        return (self.in_channels, self.input_h, self.input_w)

    @property
    def filter_shape(self) -> tuple:
        return (self.out_channels, self.in_channels, self.kernel_h, self.kernel_w)


def binary_dot(a: BitTensor, w: BitTensor, n: int) -> int:
    """±1 dot product over the first ``n`` elements of two bit tensors."""
    if n < 0 or n > a.logical_len or n > w.logical_len:
        raise ValueError(
            f"n={n} exceeds operand lengths ({a.logical_len}, {w.logical_len})"
        )
    nw = n_words(n)
    x = a.words[:nw] ^ w.words[:nw]
    tail = n % WORD_BITS
    if tail:
        x = x.copy()
        x[-1] &= np.uint64((1 << tail) - 1)
    return n - 2 * int(popcount(x).sum())


def xnor_popcount_matmul(rows: np.ndarray, cols: np.ndarray, n: int) -> np.ndarray:
    """Integer ±1 products between packed row sets.

    ``rows`` is ``(R, words)`` and ``cols`` is ``(K, words)``, both packed from
    ``n`` logical bits with zero padding. Returns the ``(R, K)`` int64 matrix of
    ``n - 2 * popcount(row XOR col)``.
    """
    out = np.empty((rows.shape[0], cols.shape[0]), dtype=np.int64)
    for start in range(0, rows.shape[0], _BLOCK_ROWS):
        block = rows[start:start + _BLOCK_ROWS]
        diff = popcount(block[:, None, :] ^ cols[None, :, :]).sum(axis=-1, dtype=np.int64)
        out[start:start + _BLOCK_ROWS] = n - 2 * diff
    return out


def _check_bank(filters: BinarizedFilterBank, geom: ConvGeometry):
    if filters.shape != geom.filter_shape:
        raise ValueError(f"filter shape {filters.shape} does not match geometry {geom.filter_shape}")


def _im2row_bits(bits: np.ndarray, geom: ConvGeometry, fill: bool) -> np.ndarray:
    """(N, C, H, W) bools -> (N * OH * OW, C * kh * kw) bools."""
    p = geom.padding
    if p:
        bits = np.pad(bits, ((0, 0), (0, 0), (p, p), (p, p)), constant_values=fill)
    win = sliding_window_view(bits, (geom.kernel_h, geom.kernel_w), axis=(2, 3))
    s = geom.stride
    win = win[:, :, : geom.output_h * s : s, : geom.output_w * s : s]
    # (N, C, OH, OW, kh, kw) -> (N, OH, OW, C, kh, kw)
    win = win.transpose(0, 2, 3, 1, 4, 5)
    return win.reshape(-1, geom.kernel_volume)


def _pad_overlap(geom: ConvGeometry) -> np.ndarray:
    """(OH * OW, C * kh * kw) mask of receptive-field positions that fall on padding."""
    inside = np.ones((1, geom.in_channels, geom.input_h, geom.input_w), dtype=bool)
    return ~_im2row_bits(inside, geom, fill=False)


def binary_conv2d_accumulate(input: BitTensor, filters: BinarizedFilterBank,
                             geom: ConvGeometry, pad_value: int = 1) -> np.ndarray:
    """Integer accumulators of a binary convolution.

    ``input`` has shape ``(C, H, W)`` or ``(N, C, H, W)``. ``pad_value`` is the
    constant used for padded positions: +1 or -1 stay in the binary domain; 0
    emulates zero padding by subtracting the padded positions' contribution
    from a +1-padded result.

    Returns int64 accumulators shaped ``(K, OH, OW)`` or ``(N, K, OH, OW)``.
    """
    if pad_value not in (-1, 0, 1):
        raise ValueError(f"pad_value must be -1, 0 or +1, got {pad_value}")
    _check_bank(filters, geom)
    batched = len(input.shape) == 4
    expected = geom.input_shape
    actual = input.shape[1:] if batched else input.shape
    if tuple(actual) != expected:
        raise ValueError(f"input shape {tuple(actual)} does not match geometry {expected}")
    bits = input.bits()
    if not batched:
        bits = bits[None]
    n_img = bits.shape[0]
    n = geom.kernel_volume

    rows = pack_bits(_im2row_bits(bits, geom, fill=pad_value != -1))
    fbits = filters.bits.bits().reshape(geom.out_channels, n)
    cols = pack_bits(fbits)
    acc = xnor_popcount_matmul(rows, cols, n)

    if pad_value == 0 and geom.padding:
        mask = pack_bits(_pad_overlap(geom))
        n_pad = popcount(mask).sum(axis=-1, dtype=np.int64)
        agree = popcount(mask[:, None, :] & cols[None, :, :]).sum(axis=-1, dtype=np.int64)
        correction = 2 * agree - n_pad[:, None]
        acc = acc.reshape(n_img, -1, geom.out_channels) - correction[None]

    acc = acc.reshape(n_img, geom.output_h, geom.output_w, geom.out_channels)
    acc = acc.transpose(0, 3, 1, 2)
    return acc if batched else acc[0]


def binary_conv2d(input: BitTensor, filters: BinarizedFilterBank, geom: ConvGeometry,
                  pad_value: int = 1) -> np.ndarray:
    """Binary convolution scaled per output channel by ``filters.alpha``."""
    acc = binary_conv2d_accumulate(input, filters, geom, pad_value)
    return filters.alpha[:, None, None] * acc


def binary_linear_accumulate(input: BitTensor, weights: BinarizedFilterBank) -> np.ndarray:
    """Integer ±1 matrix-vector (or matrix-matrix for ``(N, in)`` input) products."""
    if len(weights.shape) != 2:
        raise ValueError(f"linear weights must be 2-D, got shape {weights.shape}")
    n_out, n_in = weights.shape
    if input.shape[-1:] != (n_in,) or len(input.shape) > 2:
        raise ValueError(f"input shape {input.shape} does not match {n_in} input features")
    xbits = input.bits().reshape(-1, n_in)
    acc = xnor_popcount_matmul(pack_bits(xbits), pack_bits(weights.bits.bits()), n_in)
    return acc if len(input.shape) == 2 else acc[0]


def binary_linear(input: BitTensor, weights: BinarizedFilterBank) -> np.ndarray:
    """Scaled binary linear layer: ``alpha[k] * <input, row k>``."""
    return binary_linear_accumulate(input, weights) * weights.alpha
