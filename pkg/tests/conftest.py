import numpy as np
import pytest

from tac.analyzer import ConvLayer, FCLayer, ModelGraph, apply_preset
from tac.data import load_digits_dataset


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def digits():
    return load_digits_dataset()


def pm1(rng, shape):
    return np.where(rng.random(shape) < 0.5, -1.0, 1.0)


def toy_graph(binary_first=True, hidden=None, size=4, n_classes=2):
    """One 3x3 conv (2 channels, no padding) and a linear head."""
    out = size - 2
    layers = [ConvLayer("conv1", 1, 2, 3, size, size)]
    if hidden:
        layers += [FCLayer("fc1", 2 * out * out, hidden), FCLayer("fc2", hidden, n_classes)]
    else:
        layers += [FCLayer("fc1", 2 * out * out, n_classes)]
    g = ModelGraph("toy", (1, size, size), tuple(layers))
    return apply_preset(g, "binary-conv", first_last_full=not binary_first)


def separable_toy_data(rng, n=200, size=4):
    """Two classes of 1xSxS images: bright left half vs bright right half, plus noise."""
    y = rng.integers(0, 2, n)
    X = rng.normal(0, 0.3, (n, 1, size, size))
    half = size // 2
    X[y == 0, :, :, :half] += 1.0
    X[y == 0, :, :, half:] -= 1.0
    X[y == 1, :, :, :half] -= 1.0
    X[y == 1, :, :, half:] += 1.0
    return X, y


@pytest.fixture(scope="session")
def digits_pipeline(digits):
    """Binary-conv digits network taken through every stage (short fine-tuning)."""
    from tac.train import TrainConfig, run_pipeline
    from tac.zoo import get_graph

    cfg = TrainConfig(epochs=30, batch_size=64, fine_tune_lr=1e-4, finetune_epochs=3, seed=0)
    g = apply_preset(get_graph("digits-small"), "binary-conv")
    return run_pipeline(g, digits.train, cfg), cfg


# one "PASS/FAIL criterion N" line per acceptance criterion, echoed in the summary
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
