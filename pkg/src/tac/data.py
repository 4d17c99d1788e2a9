"""Dataset readers: IDX (MNIST) files, CIFAR-10 binary batches, and scikit-learn's digits."""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class DataError(ValueError):
    """A dataset file is missing, truncated or malformed."""


IDX_DTYPES = {
    0x08: np.dtype("u1"),
    0x09: np.dtype("i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}
CIFAR_IMAGE_BYTES = 3 * 32 * 32
CIFAR_RECORD_BYTES = 1 + CIFAR_IMAGE_BYTES


@dataclass
class Dataset:
    name: str
    X_train: np.ndarray
    y_train: np.ndarray
    X_test: np.ndarray
    y_test: np.ndarray

    @property
    def n_classes(self) -> int:
        return int(max(self.y_train.max(), self.y_test.max())) + 1

    @property
    def input_shape(self) -> tuple:
        return self.X_train.shape[1:]

    @property
    def train(self):
        return self.X_train, self.y_train

    @property
    def test(self):
        return self.X_test, self.y_test


def _open(path):
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing data file: {path}")
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def read_idx(path) -> np.ndarray:
    """Read an IDX file (optionally gzip-compressed), validating magic number and length."""
    with _open(path) as f:
        data = f.read()
    if len(data) < 4:
        raise DataError(f"{path}: too short for an IDX header")
    zero, dtype_code, ndim = struct.unpack_from(">HBB", data, 0)
    if zero != 0 or dtype_code not in IDX_DTYPES:
        raise DataError(f"{path}: bad IDX magic number")
    if len(data) < 4 + 4 * ndim:
        raise DataError(f"{path}: truncated IDX dimensions")
    dims = struct.unpack_from(f">{ndim}I", data, 4)
    dtype = IDX_DTYPES[dtype_code]
    expected = 4 + 4 * ndim + int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    if len(data) != expected:
        raise DataError(f"{path}: {len(data)} bytes, expected {expected} for dims {dims}")
    return np.frombuffer(data, dtype=dtype, offset=4 + 4 * ndim).reshape(dims)


def write_idx(path, array: np.ndarray):
    array = np.asarray(array)
    codes = {v.str.lstrip("<>|="): k for k, v in IDX_DTYPES.items()}
    key = array.dtype.str.lstrip("<>|=")
    if key not in codes:
        raise ValueError(f"dtype {array.dtype} has no IDX code")
    code = codes[key]
    header = struct.pack(f">HBB{array.ndim}I", 0, code, array.ndim, *array.shape)
    payload = array.astype(IDX_DTYPES[code]).tobytes()
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "wb") as f:
        f.write(header + payload)


MNIST_FILES = {
    "X_train": "train-images-idx3-ubyte",
    "y_train": "train-labels-idx1-ubyte",
    "X_test": "t10k-images-idx3-ubyte",
    "y_test": "t10k-labels-idx1-ubyte",
}


def _find(directory: Path, stem: str) -> Path:
    for candidate in (stem, stem + ".gz", stem.replace("-idx", ".idx")):
        if (directory / candidate).exists():
            return directory / candidate
    raise DataError(f"missing {stem}[.gz] in {directory}")


def load_mnist(directory, limit: int | None = None) -> Dataset:
    """MNIST-format IDX files in ``directory``, scaled to [0, 1] then standardized."""
    directory = Path(directory)
    arrays = {k: read_idx(_find(directory, v)) for k, v in MNIST_FILES.items()}
    for split in ("train", "test"):
        X, y = arrays[f"X_{split}"], arrays[f"y_{split}"]
        if X.ndim != 3 or y.ndim != 1 or len(X) != len(y):
            raise DataError(f"{split} images {X.shape} and labels {y.shape} are inconsistent")
    return _finish("mnist", arrays, 255.0, limit)


def read_cifar10_batch(path) -> tuple[np.ndarray, np.ndarray]:
    """One CIFAR-10 binary batch: ``(images uint8 (N, 3, 32, 32), labels)``."""
    with _open(path) as f:
        data = f.read()
    if not data or len(data) % CIFAR_RECORD_BYTES:
        raise DataError(f"{path}: length {len(data)} is not a multiple of {CIFAR_RECORD_BYTES}")
    records = np.frombuffer(data, dtype=np.uint8).reshape(-1, CIFAR_RECORD_BYTES)
    labels = records[:, 0].astype(np.int64)
    if labels.max() > 9:
        raise DataError(f"{path}: label {labels.max()} out of range")
    return records[:, 1:].reshape(-1, 3, 32, 32), labels


def load_cifar10(directory, limit: int | None = 10000) -> Dataset:
    """CIFAR-10 binary batches; ``limit`` caps the number of training images."""
    directory = Path(directory)
    train = sorted(directory.glob("data_batch_*.bin"))
    if not train:
        raise DataError(f"no data_batch_*.bin files in {directory}")
    Xs, ys = zip(*(read_cifar10_batch(p) for p in train))
    X_test, y_test = read_cifar10_batch(directory / "test_batch.bin")
    arrays = {"X_train": np.concatenate(Xs), "y_train": np.concatenate(ys),
              "X_test": X_test, "y_test": y_test}
    return _finish("cifar10", arrays, 255.0, limit)


def load_digits_dataset(test_size: float = 0.2, seed: int = 0) -> Dataset:
    """scikit-learn's bundled 8x8 handwritten digits, stratified train/test split."""
    from sklearn.datasets import load_digits
    from sklearn.model_selection import train_test_split

    digits = load_digits()
    X = digits.images.astype(np.float64)
    X_tr, X_te, y_tr, y_te = train_test_split(
        X, digits.target, test_size=test_size, random_state=seed, stratify=digits.target
    )
    arrays = {"X_train": X_tr, "y_train": y_tr, "X_test": X_te, "y_test": y_te}
    return _finish("digits", arrays, 16.0, None)


def export_digits_idx(directory, test_size: float = 0.2, seed: int = 0) -> Path:
    """Write the digits split as MNIST-named IDX files (uint8 pixels 0-16)."""
    from sklearn.datasets import load_digits
    from sklearn.model_selection import train_test_split

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    digits = load_digits()
    X_tr, X_te, y_tr, y_te = train_test_split(
        digits.images.astype(np.uint8), digits.target.astype(np.uint8),
        test_size=test_size, random_state=seed, stratify=digits.target,
    )
    for key, arr in zip(MNIST_FILES, (X_tr, y_tr, X_te, y_te)):
        write_idx(directory / MNIST_FILES[key], arr)
    return directory


def _finish(name, arrays, scale, limit) -> Dataset:
    X_tr = arrays["X_train"].astype(np.float64) / scale
    X_te = arrays["X_test"].astype(np.float64) / scale
    y_tr = np.asarray(arrays["y_train"], dtype=np.int64)
    y_te = np.asarray(arrays["y_test"], dtype=np.int64)
    if limit is not None:
        X_tr, y_tr = X_tr[:limit], y_tr[:limit]
    if X_tr.ndim == 3:
        X_tr, X_te = X_tr[:, None], X_te[:, None]
    mean, std = X_tr.mean(), X_tr.std()
    return Dataset(name, (X_tr - mean) / std, y_tr, (X_te - mean) / std, y_te)


def load_dataset(name: str, path=None, limit: int | None = None) -> Dataset:
    """Dispatch on dataset name: ``mnist`` and ``cifar10`` need ``path``; ``digits`` is bundled."""
    if name == "digits":
        return load_digits_dataset()
    if path is None:
        raise DataError(f"dataset {name!r} needs a path")
    if not os.path.isdir(path):
        raise DataError(f"dataset directory {path} does not exist")
    if name == "mnist":
        return load_mnist(path, limit)
    if name == "cifar10":
        return load_cifar10(path, limit if limit is not None else 10000)
    raise DataError(f"unknown dataset {name!r}; choose mnist, cifar10 or digits")
