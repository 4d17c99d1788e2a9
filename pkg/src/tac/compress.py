"""Magnitude pruning, k-means codebook quantization and sparse quantized storage.

A compressed fully connected layer keeps only its unpruned weights, in CSR
order (``row_ptr``/``col_idx``), and replaces each kept weight by a ``b``-bit
index into a shared codebook of at most ``2**b`` levels.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .tensor import as_tensor, n_words, pack_bits, unpack_bits

LEVEL_BITS = 32
ROW_PTR_BITS = 32
DEFAULT_INDEX_BITS = 16
# rows, cols, kept count, bit width, level count as u32
HEADER = struct.Struct("<5I")
HEADER_BITS = HEADER.size * 8


# -- pruning -----------------------------------------------------------------

def n_pruned(n: int, rate: float) -> int:
    return math.floor(rate * n)


def prune_by_magnitude(w, rate: float, mask=None) -> np.ndarray:
    """Keep-mask removing exactly ``floor(rate * w.size)`` smallest-magnitude weights.

    Ties are broken by flat index, lower index removed first. If ``mask`` is
    given, already-pruned positions are removed before any kept weight, so
    successive calls with increasing rates produce nested masks.
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"pruning rate must be in [0, 1), got {rate}")
    w = as_tensor(w)
    mag = np.abs(w).ravel()
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != w.shape:
            raise ValueError(f"mask shape {mask.shape} does not match weights {w.shape}")
        mag = np.where(mask.ravel(), mag, -1.0)
    remove = np.argsort(mag, kind="stable")[: n_pruned(mag.size, rate)]
    keep = np.ones(mag.size, dtype=bool)
    keep[remove] = False
    return keep.reshape(w.shape)


# -- codebook quantization ---------------------------------------------------

@dataclass(frozen=True, eq=False)
class Codebook:
    """Ascending distinct quantization levels for a ``bit_width``-bit index.

    Levels are held at float32 precision, the precision they are stored at.
    """

    levels: np.ndarray
    bit_width: int

    def __post_init__(self):
        if self.bit_width < 1:
            raise ValueError(f"bit width must be >= 1, got {self.bit_width}")
        levels = np.asarray(self.levels, dtype=np.float32).astype(np.float64).ravel()
        if not 1 <= levels.size <= 2 ** self.bit_width:
            raise ValueError(f"{levels.size} levels do not fit a {self.bit_width}-bit index")
        if not np.all(np.isfinite(levels)):
            raise ValueError("codebook levels must be finite")
        if np.any(np.diff(levels) <= 0):
            raise ValueError("codebook levels must be strictly ascending")
        levels.flags.writeable = False
        object.__setattr__(self, "levels", levels)

    def __len__(self):
        return self.levels.size

    def __eq__(self, other):
        if not isinstance(other, Codebook):
            return NotImplemented
        return self.bit_width == other.bit_width and np.array_equal(self.levels, other.levels)

    def assign(self, values) -> np.ndarray:
        """Index of the nearest level for each value (lower level on ties)."""
        values = np.asarray(values, dtype=np.float64).ravel()
        return nearest(values, self.levels)


def nearest(values: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    # argmin over sorted centroids picks the lower one on exact ties
    d = np.abs(values[:, None] - centroids[None, :])
    return d.argmin(axis=1)


@dataclass
class LloydResult:
    centroids: np.ndarray
    labels: np.ndarray
    n_iter: int
    inertia_history: list = field(default_factory=list)


def lloyd(values: np.ndarray, init: np.ndarray, max_iter: int = 300,
          tol: float = 1e-8) -> LloydResult:
    """1-D Lloyd iterations from ``init``.

    Stops once no centroid moves by ``tol`` or more, or after ``max_iter``
    iterations. An empty cluster is re-seeded at the value farthest from its
    assigned centroid. ``inertia_history`` records the within-cluster sum of
    squares after every assignment step.
    """
    centroids = np.sort(np.asarray(init, dtype=np.float64))
    k = centroids.size
    history = []
    labels = nearest(values, centroids)
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        history.append(float(((values - centroids[labels]) ** 2).sum()))
        counts = np.bincount(labels, minlength=k)
        sums = np.bincount(labels, weights=values, minlength=k)
        new = centroids.copy()
        filled = counts > 0
        new[filled] = sums[filled] / counts[filled]
        for j in np.flatnonzero(~filled):
            err = np.abs(values - new[labels])
            far = int(err.argmax())
            new[j] = values[far]
            labels[far] = j
        moved = np.abs(new - centroids).max()
        order = np.argsort(new, kind="stable")
        centroids = new[order]
        labels = nearest(values, centroids)
        if moved < tol:
            break
    history.append(float(((values - centroids[labels]) ** 2).sum()))
    return LloydResult(centroids, labels, n_iter, history)


def linear_init(values: np.ndarray, k: int) -> np.ndarray:
    return np.linspace(values.min(), values.max(), k)


def optimal_init(values: np.ndarray, k: int) -> np.ndarray:
    """Globally optimal 1-D k-means centroids.

    Dynamic program over the sorted values: the best split of the first ``j``
    values into ``m`` contiguous clusters. The optimal split point is monotone
    in ``j``, so each row is filled by divide and conquer in O(n log n),
    one vectorized pass per recursion depth.
    """
    x = np.sort(values)
    n = x.size
    s1 = np.concatenate([[0.0], np.cumsum(x)])
    s2 = np.concatenate([[0.0], np.cumsum(x * x)])

    def cost(i, j):
        # within-cluster sum of squares of x[i:j], i < j
        cnt = j - i
        s = s1[j] - s1[i]
        return np.maximum(s2[j] - s2[i] - s * s / cnt, 0.0)

    prev = np.full(n + 1, np.inf)
    prev[0] = 0.0
    split = np.zeros((k + 1, n + 1), dtype=np.int64)
    for m in range(1, k + 1):
        cur = np.full(n + 1, np.inf)
        # all divide-and-conquer nodes of one recursion depth at once:
        # node t fills cur[mid_t] searching splits in [ilo_t, min(ihi_t, mid_t - 1)]
        jlo, jhi = np.array([m]), np.array([n])
        ilo, ihi = np.array([m - 1]), np.array([n - 1])
        while jlo.size:
            j = (jlo + jhi) // 2
            top = np.minimum(ihi, j - 1)
            lengths = top - ilo + 1
            node = np.repeat(np.arange(j.size), lengths)
            starts = np.concatenate([[0], np.cumsum(lengths)[:-1]])
            cand = ilo[node] + np.arange(node.size) - starts[node]
            totals = prev[cand] + cost(cand, j[node])
            # per node: smallest total, lowest split index on ties
            best = np.lexsort((cand, totals, node))[starts]
            opt = cand[best]
            cur[j] = totals[best]
            split[m, j] = opt
            jlo, jhi = np.concatenate([jlo, j + 1]), np.concatenate([j - 1, jhi])
            ilo, ihi = np.concatenate([ilo, opt]), np.concatenate([opt, ihi])
            keep = jlo <= jhi
            jlo, jhi, ilo, ihi = jlo[keep], jhi[keep], ilo[keep], ihi[keep]
        prev = cur
    bounds = [n]
    for m in range(k, 0, -1):
        bounds.append(split[m, bounds[-1]])
    bounds = bounds[::-1]
    return np.array([x[bounds[i]:bounds[i + 1]].mean() for i in range(k)])


def kmeans_quantize(kept_weights, bit_width: int, max_iter: int = 300,
                    tol: float = 1e-8, method: str = "optimal") -> tuple[Codebook, np.ndarray]:
    """Cluster weights into at most ``2**bit_width`` levels.

    ``method="optimal"`` starts Lloyd iterations from the exact 1-D k-means
    solution (so they stop immediately); ``method="lloyd"`` starts them from
    levels evenly spaced between the smallest and largest weight.

    Returns the codebook and the per-weight code array. With no more distinct
    values than levels, the codebook is exactly the distinct values.
    """
    values = as_tensor(kept_weights).ravel()
    if values.size == 0:
        raise ValueError("cannot quantize an empty weight list")
    if bit_width < 1:
        raise ValueError(f"bit width must be >= 1, got {bit_width}")
    if method not in ("optimal", "lloyd"):
        raise ValueError(f"unknown k-means method {method!r}")
    distinct = np.unique(values)
    k = min(2 ** bit_width, distinct.size)
    if distinct.size <= k:
        centroids = distinct
    else:
        init = optimal_init(values, k) if method == "optimal" else linear_init(values, k)
        centroids = lloyd(values, init, max_iter, tol).centroids
    # storage precision may merge centroids; re-assign against stored levels
    levels = np.unique(centroids.astype(np.float32))
    codebook = Codebook(levels, bit_width)
    return codebook, codebook.assign(values)


# -- sparse quantized layer --------------------------------------------------

def storage_bits(n_kept: int, bit_width: int, n_levels: int, rows: int,
                 index_bits: int = DEFAULT_INDEX_BITS) -> int:
    """Bits needed to store a sparse quantized layer.

    Codes at ``bit_width`` bits each, 32-bit levels, and, unless ``index_bits``
    is 0, one column index per kept weight plus a 32-bit row pointer per row
    boundary.
    """
    bits = n_kept * bit_width + n_levels * LEVEL_BITS
    if index_bits:
        bits += n_kept * index_bits + (rows + 1) * ROW_PTR_BITS
    return bits


def col_index_bits(cols: int) -> int:
    """Width of the serialized column indices for a matrix with ``cols`` columns."""
    return 16 if cols <= 2 ** 16 else 32


@dataclass(frozen=True, eq=False)
class SparseQuantLayer:
    rows: int
    cols: int
    row_ptr: np.ndarray
    col_idx: np.ndarray
    codes: np.ndarray
    codebook: Codebook

    def __post_init__(self):
        row_ptr = np.asarray(self.row_ptr, dtype=np.int64).ravel()
        col_idx = np.asarray(self.col_idx, dtype=np.int64).ravel()
        codes = np.asarray(self.codes, dtype=np.int64).ravel()
        if self.rows < 0 or self.cols < 0:
            raise ValueError("layer dims must be non-negative")
        if row_ptr.size != self.rows + 1 or row_ptr[0] != 0:
            raise ValueError("row_ptr must have rows + 1 entries starting at 0")
        if np.any(np.diff(row_ptr) < 0):
            raise ValueError("row_ptr must be non-decreasing")
        if not row_ptr[-1] == col_idx.size == codes.size:
            raise ValueError(
                f"row_ptr ends at {row_ptr[-1]} but there are {col_idx.size} "
                f"column indices and {codes.size} codes"
            )
        if col_idx.size and (col_idx.min() < 0 or col_idx.max() >= self.cols):
            raise ValueError("column index out of range")
        for r in range(self.rows):
            seg = col_idx[row_ptr[r]:row_ptr[r + 1]]
            if np.any(np.diff(seg) <= 0):
                raise ValueError(f"column indices in row {r} are not strictly increasing")
        if codes.size and (codes.min() < 0 or codes.max() >= len(self.codebook)):
            raise ValueError("code outside the codebook")
        for name, arr in (("row_ptr", row_ptr), ("col_idx", col_idx), ("codes", codes)):
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    @property
    def shape(self) -> tuple:
        return (self.rows, self.cols)

    @property
    def n_kept(self) -> int:
        return int(self.codes.size)

    @property
    def bit_width(self) -> int:
        return self.codebook.bit_width

    def values(self) -> np.ndarray:
        return self.codebook.levels[self.codes]

    def mask(self) -> np.ndarray:
        m = np.zeros(self.shape, dtype=bool)
        m[np.repeat(np.arange(self.rows), np.diff(self.row_ptr)), self.col_idx] = True
        return m

    def to_csr(self) -> scipy.sparse.csr_matrix:
        return scipy.sparse.csr_matrix(
            (self.values(), self.col_idx, self.row_ptr), shape=self.shape
        )

    def storage_bits(self, index_bits: int = DEFAULT_INDEX_BITS) -> int:
        return storage_bits(self.n_kept, self.bit_width, len(self.codebook), self.rows, index_bits)

    def __eq__(self, other):
        if not isinstance(other, SparseQuantLayer):
            return NotImplemented
        return (
            self.shape == other.shape
            and self.codebook == other.codebook
            and np.array_equal(self.row_ptr, other.row_ptr)
            and np.array_equal(self.col_idx, other.col_idx)
            and np.array_equal(self.codes, other.codes)
        )

    # Layout, little-endian: header (rows, cols, kept, b, n_levels) as u32;
    # levels as f32; row_ptr as u32; col_idx as u16 (u32 past 65536 columns);
    # codes packed b bits each, LSB first, into u64 words with zero padding.
    def to_bytes(self) -> bytes:
        b = self.bit_width
        idx_dtype = "<u2" if col_index_bits(self.cols) == 16 else "<u4"
        code_bits = ((self.codes[:, None] >> np.arange(b)) & 1).astype(bool).ravel()
        return b"".join([
            HEADER.pack(self.rows, self.cols, self.n_kept, b, len(self.codebook)),
            self.codebook.levels.astype("<f4").tobytes(),
            self.row_ptr.astype("<u4").tobytes(),
            self.col_idx.astype(idx_dtype).tobytes(),
            pack_bits(code_bits).astype("<u8").tobytes(),
        ])

    @classmethod
    def from_bytes(cls, data: bytes) -> "SparseQuantLayer":
        if len(data) < HEADER.size:
            raise ValueError("truncated SparseQuantLayer header")
        rows, cols, kept, b, n_levels = HEADER.unpack_from(data, 0)
        idx_size = col_index_bits(cols) // 8
        sizes = [4 * n_levels, 4 * (rows + 1), idx_size * kept, 8 * n_words(kept * b)]
        if len(data) != HEADER.size + sum(sizes):
            raise ValueError(
                f"SparseQuantLayer blob has {len(data)} bytes, expected {HEADER.size + sum(sizes)}"
            )
        off = HEADER.size
        levels = np.frombuffer(data, "<f4", n_levels, off)
        off += sizes[0]
        row_ptr = np.frombuffer(data, "<u4", rows + 1, off)
        off += sizes[1]
        col_idx = np.frombuffer(data, "<u2" if idx_size == 2 else "<u4", kept, off)
        off += sizes[2]
        words = np.frombuffer(data, "<u8", n_words(kept * b), off)
        bits = unpack_bits(words, kept * b).reshape(kept, b)
        codes = (bits.astype(np.int64) << np.arange(b)).sum(axis=1)
        return cls(rows, cols, row_ptr, col_idx, codes, Codebook(levels, b))


def encode(w, mask, codebook: Codebook, codes) -> SparseQuantLayer:
    """Build a sparse quantized layer from a weight matrix and its keep-mask.

    ``codes`` holds one code per kept weight, in row-major order of ``mask``.
    """
    w = as_tensor(w)
    mask = np.asarray(mask, dtype=bool)
    if w.ndim != 2:
        raise ValueError(f"expected a 2-D weight matrix, got shape {w.shape}")
    if mask.shape != w.shape:
        raise ValueError(f"mask shape {mask.shape} does not match weights {w.shape}")
    codes = np.asarray(codes, dtype=np.int64).ravel()
    n_kept = int(mask.sum())
    if codes.size != n_kept:
        raise ValueError(f"{codes.size} codes for {n_kept} kept weights")
    rows, cols = np.nonzero(mask)
    row_ptr = np.concatenate([[0], np.cumsum(np.bincount(rows, minlength=w.shape[0]))])
    return SparseQuantLayer(w.shape[0], w.shape[1], row_ptr, cols, codes, codebook)


def decode(layer: SparseQuantLayer) -> np.ndarray:
    """Dense matrix with zeros at pruned positions and codebook levels elsewhere."""
    dense = np.zeros(layer.shape)
    r = np.repeat(np.arange(layer.rows), np.diff(layer.row_ptr))
    dense[r, layer.col_idx] = layer.values()
    return dense


def fc_forward(layer: SparseQuantLayer, x) -> np.ndarray:
    """``decode(layer) @ x`` without densifying; ``x`` is ``(cols,)`` or ``(N, cols)``."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != layer.cols or x.ndim > 2:
        raise ValueError(f"input of shape {x.shape} does not match {layer.cols} columns")
    if x.ndim == 1:
        return layer.to_csr() @ x
    return (layer.to_csr() @ x.T).T


def compress_matrix(w, rate: float, bit_width: int, mask=None) -> SparseQuantLayer:
    """Prune ``w`` at ``rate`` (or use ``mask``), quantize the survivors, encode."""
    w = as_tensor(w)
    if mask is None:
        mask = prune_by_magnitude(w, rate)
    kept = w[mask]
    if kept.size == 0:
        codebook, codes = Codebook([0.0], bit_width), np.zeros(0, dtype=np.int64)
    else:
        codebook, codes = kmeans_quantize(kept, bit_width)
    return encode(w, mask, codebook, codes)


# -- estimator wrappers ------------------------------------------------------

class MagnitudePruner(TransformerMixin, BaseEstimator):
    """Zero out the smallest-magnitude fraction of a weight array.

    Parameters
    ----------
    rate : float, default=0.75
        Fraction of weights removed, in ``[0, 1)``.

    Attributes
    ----------
    mask_ : ndarray of bool
        Keep-mask found by :meth:`fit`.
    """

    def __init__(self, rate=0.75):
        self.rate = rate

    def fit(self, W, y=None):
        W = check_array(W, ensure_2d=False, allow_nd=True)
        self.mask_ = prune_by_magnitude(W, self.rate)
        return self

    def transform(self, W):
        check_is_fitted(self, "mask_")
        W = check_array(W, ensure_2d=False, allow_nd=True)
        if W.shape != self.mask_.shape:
            raise ValueError(f"expected weights of shape {self.mask_.shape}, got {W.shape}")
        return np.where(self.mask_, W, 0.0)


class CodebookQuantizer(TransformerMixin, BaseEstimator):
    """k-means weight sharing with ``2**bit_width`` levels.

    ``fit`` learns ``codebook_`` from all values of the input array;
    ``predict`` maps values to codes and ``transform`` to their levels.
    """

    def __init__(self, bit_width=4, max_iter=300, tol=1e-8):
        self.bit_width = bit_width
        self.max_iter = max_iter
        self.tol = tol

    def fit(self, W, y=None):
        W = check_array(W, ensure_2d=False, allow_nd=True)
        self.codebook_, _ = kmeans_quantize(W.ravel(), self.bit_width, self.max_iter, self.tol)
        self.cluster_centers_ = self.codebook_.levels
        return self

    def predict(self, W):
        check_is_fitted(self, "codebook_")
        W = check_array(W, ensure_2d=False, allow_nd=True)
        return self.codebook_.assign(W).reshape(W.shape)

    def transform(self, W):
        return self.codebook_.levels[self.predict(W)]
