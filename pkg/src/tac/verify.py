"""Randomized self-checks of the kernels and compression routines against brute-force oracles."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import compress, reference, xnor
from .binarize import BinarizedFilterBank
from .tensor import pack


@dataclass
class SuiteResult:
    name: str
    instances: int = 0
    failures: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failures


def _pm1(rng, shape):
    return np.where(rng.random(shape) < 0.5, -1, 1)


def random_conv_instance(rng, max_channels=8, max_spatial=16, max_kernel=5):
    while True:
        c, k = rng.integers(1, max_channels + 1, size=2)
        h, w = rng.integers(1, max_spatial + 1, size=2)
        kern = int(rng.integers(1, max_kernel + 1))
        stride = int(rng.integers(1, 3))
        padding = int(rng.integers(0, 3))
        if h + 2 * padding >= kern and w + 2 * padding >= kern:
            break
    geom = xnor.ConvGeometry(int(c), int(k), kern, kern, int(h), int(w), stride, padding)
    pad_value = int(rng.choice([-1, 0, 1]))
    return geom, _pm1(rng, geom.input_shape), _pm1(rng, geom.filter_shape), pad_value


def check_conv(rng) -> str | None:
    geom, x, w, pad_value = random_conv_instance(rng)
    bank = BinarizedFilterBank(pack(w), np.ones(geom.out_channels))
    got = xnor.binary_conv2d_accumulate(pack(x), bank, geom, pad_value)
    want = reference.dense_conv2d(x, w, geom.stride, geom.padding, pad_value)
    if not np.array_equal(got, want):
        return f"conv {geom} pad_value={pad_value}"
    n = geom.kernel_volume
    if np.abs(got).max() > n or (pad_value != 0 and np.any((got - n) % 2)):
        return f"conv accumulator out of range or wrong parity {geom}"
    return None


def check_linear(rng) -> str | None:
    n_in = int(rng.integers(1, 8 * 16 * 16 // 4))
    n_out = int(rng.integers(1, 9))
    x = _pm1(rng, n_in)
    w = _pm1(rng, (n_out, n_in))
    bank = BinarizedFilterBank(pack(w), np.ones(n_out))
    got = xnor.binary_linear_accumulate(pack(x), bank)
    want = reference.dense_matvec(w, x)
    if not np.array_equal(got, want):
        return f"linear {n_out}x{n_in}"
    return None


def check_pruning(rng) -> str | None:
    n = int(rng.integers(1, 300))
    # coarse values make magnitude ties common
    w = np.round(rng.normal(size=n), int(rng.integers(0, 3)))
    rates = np.sort(rng.random(3) * 0.999)
    prev = None
    for rate in rates:
        got = compress.prune_by_magnitude(w, float(rate))
        if not np.array_equal(got, reference.sort_prune_mask(w, float(rate))):
            return f"prune n={n} rate={rate}"
        if got.sum() != n - math.floor(rate * n):
            return f"prune count n={n} rate={rate}"
        if prev is not None and np.any(got & ~prev):
            return f"prune nesting n={n} rate={rate}"
        prev = got
    return None


def check_quantization(rng) -> str | None:
    rows, cols = (int(v) for v in rng.integers(1, 24, size=2))
    w = rng.normal(size=(rows, cols)).astype(np.float32).astype(np.float64)
    rate = float(rng.random() * 0.9)
    b = int(rng.integers(1, 5))
    layer = compress.compress_matrix(w, rate, b)
    mask = compress.prune_by_magnitude(w, rate)
    expected = np.where(mask, layer.codebook.levels[layer.codebook.assign(w)].reshape(w.shape), 0.0)
    if not np.array_equal(compress.decode(layer), expected):
        return f"encode/decode {rows}x{cols} rate={rate} b={b}"
    if compress.SparseQuantLayer.from_bytes(layer.to_bytes()) != layer:
        return f"serialize roundtrip {rows}x{cols} rate={rate} b={b}"
    kept = w[mask]
    distinct = np.unique(kept)
    if distinct.size <= 2 ** b:
        cb, codes = compress.kmeans_quantize(kept, b)
        if not np.array_equal(cb.levels[codes], kept):
            return f"lossless quantization {rows}x{cols} b={b}"
    return None


SUITES = {
    "kernel-equivalence": (check_conv, check_linear),
    "pruning-oracle": (check_pruning,),
    "quantization-roundtrip": (check_quantization,),
}


def run_suites(seed: int = 0, instances: int = 500) -> list:
    """Run every suite on ``instances`` random cases (split across its checks)."""
    results = []
    for offset, (name, checks) in enumerate(SUITES.items()):
        rng = np.random.default_rng([seed, offset])
        res = SuiteResult(name)
        for i in range(instances):
            check = checks[i % len(checks)]
            msg = check(rng)
            res.instances += 1
            if msg:
                res.failures.append(f"instance {i}: {msg}")
        results.append(res)
    return results
