"""Shipped graph definitions."""

from __future__ import annotations

from .analyzer import ConvLayer, FCLayer, ModelGraph


def alexnet(n_classes: int = 1000) -> ModelGraph:
    """AlexNet with the two-group convolutions of the original, 227x227 input."""
    return ModelGraph("alexnet", (3, 227, 227), (
        ConvLayer("conv1", 3, 96, 11, 227, 227, stride=4, pool=(3, 2)),
        ConvLayer("conv2", 96, 256, 5, 27, 27, padding=2, groups=2, pool=(3, 2)),
        ConvLayer("conv3", 256, 384, 3, 13, 13, padding=1),
        ConvLayer("conv4", 384, 384, 3, 13, 13, padding=1, groups=2),
        ConvLayer("conv5", 384, 256, 3, 13, 13, padding=1, groups=2, pool=(3, 2)),
        FCLayer("fc6", 256 * 6 * 6, 4096),
        FCLayer("fc7", 4096, 4096),
        FCLayer("fc8", 4096, n_classes),
    ))


def vgg9(n_classes: int = 10) -> ModelGraph:
    """Six 3x3 convs (128-128-256-256-512-512) and three FC layers, 32x32 input.

    The channel widths follow the BinaryConnect CIFAR-10 network; treat size
    figures derived from it as approximate.
    """
    convs = []
    in_c, size = 3, 32
    for i, out_c in enumerate((128, 128, 256, 256, 512, 512)):
        pool = (2, 2) if i % 2 else None
        convs.append(ConvLayer(f"conv{i + 1}", in_c, out_c, 3, size, size, padding=1, pool=pool))
        in_c = out_c
        if pool:
            size //= 2
    return ModelGraph("vgg9", (3, 32, 32), tuple(convs) + (
        FCLayer("fc7", 512 * 4 * 4, 1024),
        FCLayer("fc8", 1024, 1024),
        FCLayer("fc9", 1024, n_classes),
    ))


def small_cnn(name: str, size: int, channels=(16, 32, 32), hidden: int = 128,
              n_classes: int = 10, in_channels: int = 1) -> ModelGraph:
    """Three 3x3 convs (pooling after the last two) and two FC layers."""
    c1, c2, c3 = channels
    s2 = size // 2
    s3 = s2 // 2
    return ModelGraph(name, (in_channels, size, size), (
        ConvLayer("conv1", in_channels, c1, 3, size, size, padding=1),
        ConvLayer("conv2", c1, c2, 3, size, size, padding=1, pool=(2, 2)),
        ConvLayer("conv3", c2, c3, 3, s2, s2, padding=1, pool=(2, 2)),
        FCLayer("fc1", c3 * s3 * s3, hidden),
        FCLayer("fc2", hidden, n_classes),
    ))


GRAPHS = {
    "alexnet": alexnet,
    "vgg9": vgg9,
    "mnist-small": lambda: small_cnn("mnist-small", 28),
    "digits-small": lambda: small_cnn("digits-small", 8, hidden=64),
    "cifar-small": lambda: small_cnn("cifar-small", 32, in_channels=3),
}


def get_graph(name: str) -> ModelGraph:
    try:
        return GRAPHS[name]()
    except KeyError:
        raise KeyError(f"unknown graph {name!r}; known graphs: {', '.join(sorted(GRAPHS))}") from None
