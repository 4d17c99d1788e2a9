"""Dense and bit-packed tensors.

Dense tensors are plain ``numpy.ndarray`` objects (float64, row-major);
:func:`as_tensor` is the validating constructor. :class:`BitTensor` stores a
±1 tensor at one bit per element in 64-bit words, with element ``i`` at bit
``i % 64`` of word ``i // 64``. A set bit encodes +1, a clear bit -1.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Sequence

import numpy as np

WORD_BITS = 64


def as_tensor(x, dtype=np.float64) -> np.ndarray:
    """Return ``x`` as a C-contiguous float array, rejecting NaN and Inf."""
    arr = np.ascontiguousarray(x, dtype=dtype)
    if not np.all(np.isfinite(arr)):
        bad = int(np.flatnonzero(~np.isfinite(arr.ravel()))[0])
        raise ValueError(f"tensor contains a non-finite value at flat index {bad}")
    return arr


def n_words(n_bits: int) -> int:
    return (n_bits + WORD_BITS - 1) // WORD_BITS


def pack_bits(bits: np.ndarray) -> np.ndarray:
    """Pack a boolean array along its last axis into little-endian uint64 words.

    Leading axes are preserved, so a ``(rows, n)`` array becomes
    ``(rows, n_words(n))``. Padding bits are zero.
    """
    bits = np.asarray(bits, dtype=bool)
    n = bits.shape[-1]
    nw = n_words(n)
    pad = nw * WORD_BITS - n
    if pad:
        widths = [(0, 0)] * (bits.ndim - 1) + [(0, pad)]
        bits = np.pad(bits, widths)
    packed = np.packbits(bits, axis=-1, bitorder="little")
    return np.ascontiguousarray(packed).view("<u8").astype(np.uint64, copy=False)


def unpack_bits(words: np.ndarray, n: int) -> np.ndarray:
    """Inverse of :func:`pack_bits`: the first ``n`` bits along the last axis."""
    words = np.ascontiguousarray(words, dtype="<u8")
    as_bytes = words.view(np.uint8)
    return np.unpackbits(as_bytes, axis=-1, count=n, bitorder="little").astype(bool)


def popcount(words: np.ndarray) -> np.ndarray:
    return np.bitwise_count(words)


@dataclass(frozen=True, eq=False)
class BitTensor:
    """Immutable bit-packed ±1 tensor.

    Parameters
    ----------
    shape : tuple of int
        Logical shape; the element count is ``prod(shape)``.
    words : ndarray of uint64
        ``ceil(prod(shape) / 64)`` words. Bits past the last element must be 0.
    """

    shape: tuple
    words: np.ndarray

    def __post_init__(self):
        shape = tuple(int(d) for d in self.shape)
        if any(d < 0 for d in shape):
            raise ValueError(f"negative dimension in shape {shape}")
        words = np.array(self.words, dtype=np.uint64).ravel()
        n = int(np.prod(shape, dtype=np.int64))
        if words.size != n_words(n):
            raise ValueError(f"expected {n_words(n)} words for {n} bits, got {words.size}")
        tail = n % WORD_BITS
        if tail and int(words[-1]) >> tail:
            raise ValueError("padding bits beyond logical_len must be zero")
        words.flags.writeable = False
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "words", words)

    @property
    def logical_len(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64))

    @property
    def size(self) -> int:
        return self.logical_len

    def bits(self) -> np.ndarray:
        """Boolean view of the logical elements, shaped like the tensor."""
        return unpack_bits(self.words, self.logical_len).reshape(self.shape)

    def count_ones(self) -> int:
        """Number of +1 elements."""
        return int(popcount(self.words).sum())

    def reshape(self, shape: Sequence[int]) -> "BitTensor":
        # row-major layout means reshaping never moves bits
        shape = tuple(int(d) for d in shape)
        if int(np.prod(shape, dtype=np.int64)) != self.logical_len:
            raise ValueError(f"cannot reshape {self.shape} into {shape}")
        return BitTensor(shape, self.words)

    def __eq__(self, other):
        if not isinstance(other, BitTensor):
            return NotImplemented
        return self.shape == other.shape and np.array_equal(self.words, other.words)

    def __hash__(self):
        return hash((self.shape, self.words.tobytes()))

    def __repr__(self):
        return f"BitTensor(shape={self.shape}, words={self.words.size})"

    # persistence: u32 ndim, u32 dims..., then u64 words, all little-endian
    def to_bytes(self) -> bytes:
        header = struct.pack(f"<I{len(self.shape)}I", len(self.shape), *self.shape)
        return header + self.words.astype("<u8").tobytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> "BitTensor":
        if len(data) < 4:
            raise ValueError("truncated BitTensor blob")
        (ndim,) = struct.unpack_from("<I", data, 0)
        off = 4 + 4 * ndim
        if len(data) < off:
            raise ValueError("truncated BitTensor shape header")
        shape = struct.unpack_from(f"<{ndim}I", data, 4)
        n = int(np.prod(shape, dtype=np.int64))
        expected = off + 8 * n_words(n)
        if len(data) != expected:
            raise ValueError(f"BitTensor blob has {len(data)} bytes, expected {expected}")
        words = np.frombuffer(data, dtype="<u8", offset=off)
        return cls(shape, words)


def pack(t) -> BitTensor:
    """Pack a tensor whose elements are exactly -1.0 or +1.0."""
    arr = np.asarray(t, dtype=np.float64)
    flat = arr.ravel()
    ok = (flat == 1.0) | (flat == -1.0)
    if not ok.all():
        bad = int(np.flatnonzero(~ok)[0])
        raise ValueError(f"element {bad} is {flat[bad]!r}; pack() accepts only -1 and +1")
    return BitTensor(arr.shape, pack_bits(flat > 0))


def unpack(b: BitTensor) -> np.ndarray:
    """Expand a :class:`BitTensor` to a float tensor of ±1."""
    return np.where(b.bits(), 1.0, -1.0)


def from_bits(bits: np.ndarray) -> BitTensor:
    """Build a BitTensor from a boolean array (True is +1)."""
    bits = np.asarray(bits, dtype=bool)
    return BitTensor(bits.shape, pack_bits(bits.ravel()))


# dense tensor persistence: u32 ndim, u32 dims..., then f64 data, little-endian
def tensor_to_bytes(t: np.ndarray) -> bytes:
    arr = as_tensor(t)
    header = struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape)
    return header + arr.astype("<f8").tobytes()


def tensor_from_bytes(data: bytes) -> np.ndarray:
    if len(data) < 4:
        raise ValueError("truncated tensor blob")
    (ndim,) = struct.unpack_from("<I", data, 0)
    off = 4 + 4 * ndim
    if len(data) < off:
        raise ValueError("truncated tensor shape header")
    shape = struct.unpack_from(f"<{ndim}I", data, 4)
    n = int(np.prod(shape, dtype=np.int64))
    if len(data) != off + 8 * n:
        raise ValueError(f"tensor blob has {len(data)} bytes, expected {off + 8 * n}")
    return np.frombuffer(data, dtype="<f8", offset=off).reshape(shape).astype(np.float64)
