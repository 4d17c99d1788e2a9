"""Binarized convolutions, pruned and quantized FC layers, and compression accounting."""

from .analyzer import ModelGraph, Policy, analyze, apply_preset, compare
from .compress import (CodebookQuantizer, MagnitudePruner, SparseQuantLayer, decode, encode,
                       fc_forward, kmeans_quantize, prune_by_magnitude)
from .estimator import TACClassifier
from .tensor import BitTensor, pack, unpack
from .train import TrainConfig, TrainState

__version__ = "0.1.0"

__all__ = [
    "BitTensor", "CodebookQuantizer", "MagnitudePruner", "ModelGraph", "Policy",
    "SparseQuantLayer", "TACClassifier", "TrainConfig", "TrainState", "analyze",
    "apply_preset", "compare", "decode", "encode", "fc_forward", "kmeans_quantize",
    "pack", "prune_by_magnitude", "unpack",
]
