"""Desk-scale training of binarized-conv networks and the prune/quantize fine-tuning stages.

A network is built from a :class:`~tac.analyzer.ModelGraph`. Each conv layer is
followed by batch normalization and optional max-pooling. The input of a
binary layer is ``sign`` of the previous output (clipped straight-through
gradient); the input of any other layer past the first is ReLU of it. Binary
layers keep full-precision shadow weights and binarize them on every forward
pass as ``alpha * sign(W)``, with ``alpha`` the per-channel mean magnitude when
the layer is scaled.

Stages run in a fixed order: ``train_binary_net`` -> ``iterative_prune_finetune``
-> ``quantize_finetune``. Each returns a new :class:`TrainState`.
"""

from __future__ import annotations

import copy
import logging
import warnings
from dataclasses import dataclass, field, fields

import numpy as np

from . import nn
from .analyzer import BINARY, FULL, PRUNED_QUANT, ConvLayer, FCLayer, ModelGraph, Policy
from .analyzer import DEFAULT_BITS, DEFAULT_SCHEDULE
from .binarize import BinarizedFilterBank, channel_scales, sign, ste_backward
from .compress import compress_matrix, decode, fc_forward, prune_by_magnitude
from .tensor import from_bits
from .xnor import ConvGeometry, binary_conv2d, binary_linear

logger = logging.getLogger(__name__)

STAGES = ("trained", "pruned", "quantized")
EVAL_CHUNK = 512


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch):
        super().__init__(f"training diverged (non-finite loss) at epoch {epoch}")
        self.epoch = epoch


class StageOrderError(RuntimeError):
    """A pipeline stage was invoked on a state from the wrong stage."""


@dataclass
class TrainConfig:
    """Optimization and compression hyperparameters.

    ``momentum`` is the Adam first-moment decay (beta1). The learning rate is
    multiplied by ``lr_decay_factor`` every ``lr_decay_interval`` epochs.
    """

    learning_rate: float = 1e-3
    fine_tune_lr: float = 1e-8
    momentum: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-5
    batch_size: int = 128
    epochs: int = 20
    lr_decay_factor: float = 0.5
    lr_decay_interval: int = 60
    prune_schedule: tuple = DEFAULT_SCHEDULE
    quant_bits: int = DEFAULT_BITS
    finetune_epochs: int = 10
    freeze_conv: bool = False
    prune_last: bool = False
    accuracy_budget: float = 0.01
    seed: int = 0

    def __post_init__(self):
        self.prune_schedule = tuple(float(r) for r in self.prune_schedule)
        check_schedule(self.prune_schedule)
        if self.batch_size < 1 or self.epochs < 0 or self.finetune_epochs < 0:
            raise ValueError("batch_size must be positive and epoch counts non-negative")
        if self.quant_bits < 1:
            raise ValueError("quant_bits must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training options: {', '.join(sorted(unknown))}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["prune_schedule"] = list(self.prune_schedule)
        return d


def check_schedule(schedule):
    rates = list(schedule)
    if any(not 0.0 < r < 1.0 for r in rates):
        raise ValueError(f"pruning rates must lie in (0, 1): {rates}")
    if any(b <= a for a, b in zip(rates, rates[1:])):
        raise ValueError(f"pruning schedule must be strictly ascending: {rates}")


@dataclass
class TrainState:
    graph: ModelGraph
    params: dict
    buffers: dict
    masks: dict = field(default_factory=dict)
    quantized: dict = field(default_factory=dict)
    adam_m: dict = field(default_factory=dict)
    adam_v: dict = field(default_factory=dict)
    step: int = 0
    epoch: int = 0
    rng_state: dict = field(default_factory=dict)
    stage: str = "init"
    history: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def copy(self) -> "TrainState":
        return copy.deepcopy(self)


# -- network construction -------------------------------------------------------

def check_trainable(g: ModelGraph):
    for l in g.layers:
        if isinstance(l, ConvLayer):
            if l.groups != 1:
                raise ValueError(f"{l.name}: grouped convolutions are not trainable here")
            if l.pool and l.pool[0] != l.pool[1]:
                raise ValueError(f"{l.name}: only non-overlapping pooling is trainable")


def init_state(g: ModelGraph, seed: int = 0) -> TrainState:
    """Fresh parameters for ``g``; binary shadow weights start inside [-1, 1]."""
    check_trainable(g)
    rng = np.random.default_rng(seed)
    params, buffers = {}, {}
    for l in g.layers:
        if isinstance(l, ConvLayer):
            shape = (l.out_channels, l.in_channels, l.kernel, l.kernel)
            fan_in = l.in_channels * l.kernel ** 2
        else:
            shape = (l.out_features, l.in_features)
            fan_in = l.in_features
            params[f"{l.name}.bias"] = np.zeros(l.out_features)
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
        if l.policy.kind == BINARY:
            w = np.clip(w, -1.0, 1.0)
        params[f"{l.name}.weight"] = w
        if isinstance(l, ConvLayer):
            params[f"{l.name}.bn.gamma"] = np.ones(l.out_channels)
            params[f"{l.name}.bn.beta"] = np.zeros(l.out_channels)
            buffers[f"{l.name}.bn.mean"] = np.zeros(l.out_channels)
            buffers[f"{l.name}.bn.var"] = np.ones(l.out_channels)
    return TrainState(g, params, buffers, rng_state=rng.bit_generator.state)


def _alpha(w, policy: Policy):
    return channel_scales(w) if policy.scaled else np.ones(w.shape[0])


def forward(state: TrainState, x, train: bool = False, engine: str = "dense"):
    """Logits for a batch ``x`` of shape ``(N, C, H, W)``.

    ``engine="xnor"`` runs binary layers through the packed XNOR/popcount
    kernels and compressed FC layers through their sparse format; ``"dense"``
    uses float arithmetic on unpacked ±1 values. Returns ``(logits, caches)``;
    caches are only meaningful for ``engine="dense"``.
    """
    g, p, b = state.graph, state.params, state.buffers
    a = np.asarray(x, dtype=np.float64)
    if a.shape[1:] != g.input_shape:
        raise ValueError(f"input shape {a.shape[1:]} does not match graph input {g.input_shape}")
    caches = []
    for i, l in enumerate(g.layers):
        c = {"pre": a}
        if isinstance(l, FCLayer) and a.ndim > 2:
            c["unflat"] = a.shape
            a = a.reshape(a.shape[0], -1)
            c["pre"] = a
        binary = l.policy.kind == BINARY
        if binary:
            xin = sign(a)
        elif i > 0:
            xin = np.maximum(a, 0.0)
        else:
            xin = a
        c["xin"] = xin
        w = p.get(f"{l.name}.weight")
        if isinstance(l, ConvLayer):
            if binary:
                alpha = _alpha(w, l.policy)
                if engine == "xnor":
                    geom = ConvGeometry(l.in_channels, l.out_channels, l.kernel, l.kernel,
                                        l.input_h, l.input_w, l.stride, l.padding)
                    bank = BinarizedFilterBank.from_weights(w, l.policy.scaled)
                    z = binary_conv2d(from_bits(xin > 0), bank, geom, pad_value=0)
                else:
                    z, c["conv"] = nn.conv2d_forward(xin, sign(w), l.stride, l.padding)
                    z = z * alpha[None, :, None, None]
                c["alpha"] = alpha
            else:
                z, c["conv"] = nn.conv2d_forward(xin, w, l.stride, l.padding)
            z, c["bn"] = nn.batchnorm_forward(
                z, p[f"{l.name}.bn.gamma"], p[f"{l.name}.bn.beta"],
                b[f"{l.name}.bn.mean"], b[f"{l.name}.bn.var"], train,
            )
            if l.pool:
                z, c["pool"] = nn.maxpool_forward(z, *l.pool)
        else:
            bias = p[f"{l.name}.bias"]
            if l.name in state.quantized:
                q = state.quantized[l.name]
                if engine == "xnor":
                    z = fc_forward(q, xin) + bias
                else:
                    c["dense_w"] = decode(q)
                    z = xin @ c["dense_w"].T + bias
            elif binary:
                alpha = _alpha(w, l.policy)
                if engine == "xnor":
                    bank = BinarizedFilterBank.from_weights(w, l.policy.scaled)
                    z = binary_linear(from_bits(xin > 0), bank) + bias
                else:
                    z = (xin @ sign(w).T) * alpha + bias
                c["alpha"] = alpha
            else:
                z = xin @ w.T + bias
        caches.append(c)
        a = z
    return a, caches


def backward(state: TrainState, caches, dlogits) -> dict:
    """Gradients of every parameter given the loss gradient w.r.t. the logits."""
    g, p = state.graph, state.params
    grads = {}
    da = dlogits
    for i in reversed(range(len(g.layers))):
        l = g.layers[i]
        c = caches[i]
        binary = l.policy.kind == BINARY
        w = p.get(f"{l.name}.weight")
        if isinstance(l, ConvLayer):
            if l.pool:
                da = nn.maxpool_backward(da, c["pool"])
            da, grads[f"{l.name}.bn.gamma"], grads[f"{l.name}.bn.beta"] = nn.batchnorm_backward(da, c["bn"])
            if binary:
                da = da * c["alpha"][None, :, None, None]
                dxin, dwb = nn.conv2d_backward(da, sign(w), c["conv"], need_dx=i > 0)
                grads[f"{l.name}.weight"] = ste_backward(dwb, w)
            else:
                dxin, grads[f"{l.name}.weight"] = nn.conv2d_backward(da, w, c["conv"], need_dx=i > 0)
        else:
            grads[f"{l.name}.bias"] = da.sum(axis=0)
            if l.name in state.quantized:
                dxin = da @ c["dense_w"]
            elif binary:
                dz = da * c["alpha"]
                dxin = dz @ sign(w)
                grads[f"{l.name}.weight"] = ste_backward(dz.T @ c["xin"], w)
            else:
                dxin = da @ w
                grads[f"{l.name}.weight"] = da.T @ c["xin"]
        if i == 0:
            break
        pre = c["pre"]
        if binary:
            da = ste_backward(dxin, pre)
        else:
            da = dxin * (pre > 0)
        if "unflat" in c:
            da = da.reshape(c["unflat"])
    return grads


def loss_and_grads(state: TrainState, x, y):
    logits, caches = forward(state, x, train=True)
    loss, dlogits = nn.cross_entropy(logits, y)
    return loss, logits, backward(state, caches, dlogits)


# -- optimization ------------------------------------------------------------

def _trainable(state: TrainState, cfg: TrainConfig) -> list:
    names = sorted(state.params)
    if cfg.freeze_conv:
        convs = {l.name for l in state.graph.layers if isinstance(l, ConvLayer)}
        names = [n for n in names if not (n.endswith(".weight") and n.split(".")[0] in convs)]
    return names


def adam_step(state: TrainState, grads: dict, lr: float, cfg: TrainConfig, names):
    """One Adam update with L2 weight decay; masked weights stay at zero."""
    state.step += 1
    t = state.step
    b1, b2 = cfg.momentum, cfg.beta2
    for name in names:
        p = state.params[name]
        g = grads[name] + cfg.weight_decay * p
        layer = name.split(".")[0]
        mask = state.masks.get(layer) if name.endswith(".weight") else None
        if mask is not None:
            g = g * mask
        m = state.adam_m.setdefault(name, np.zeros_like(p))
        v = state.adam_v.setdefault(name, np.zeros_like(p))
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        p -= lr * mhat / (np.sqrt(vhat) + cfg.eps)
        if mask is not None:
            p *= mask
    for l in state.graph.layers:
        if l.policy.kind == BINARY:
            np.clip(state.params[f"{l.name}.weight"], -1.0, 1.0, out=state.params[f"{l.name}.weight"])


def run_epochs(state: TrainState, X, y, cfg: TrainConfig, epochs: int, lr: float,
               stage: str, decay: bool = True) -> TrainState:
    """Minibatch Adam for ``epochs`` epochs; appends one history entry per epoch."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    check_labels(state.graph, y)
    rng = np.random.default_rng()
    if state.rng_state:
        rng.bit_generator.state = state.rng_state
    names = _trainable(state, cfg)
    for e in range(epochs):
        cur_lr = lr * cfg.lr_decay_factor ** (e // cfg.lr_decay_interval) if decay else lr
        order = rng.permutation(len(X))
        total, correct = 0.0, 0
        for start in range(0, len(X), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss, logits, grads = loss_and_grads(state, X[idx], y[idx])
            if not np.isfinite(loss):
                raise TrainingDiverged(state.epoch + 1)
            adam_step(state, grads, cur_lr, cfg, names)
            total += loss * len(idx)
            correct += int((logits.argmax(axis=1) == y[idx]).sum())
        state.epoch += 1
        entry = {"stage": stage, "epoch": state.epoch, "loss": total / len(X),
                 "accuracy": correct / len(X)}
        state.history.append(entry)
        logger.info("%s epoch %d loss %.4f acc %.4f", stage, state.epoch, entry["loss"], entry["accuracy"])
    state.rng_state = rng.bit_generator.state
    return state


# -- pipeline stages -----------------------------------------------------------

def train_binary_net(g: ModelGraph, data, cfg: TrainConfig) -> TrainState:
    """Train ``g`` from scratch: binary conv layers, full-precision FC layers."""
    for l in g.layers:
        if l.policy.kind == PRUNED_QUANT:
            raise ValueError(f"{l.name}: train the network before compressing it")
    X, y = data
    state = init_state(g, cfg.seed)
    run_epochs(state, X, y, cfg, cfg.epochs, cfg.learning_rate, "train")
    state.stage = "trained"
    return state


def _compressible(g: ModelGraph) -> list:
    return [l for l in g.layers if isinstance(l, FCLayer) and l.policy.kind == FULL]


def iterative_prune_finetune(state: TrainState, schedule, cfg: TrainConfig, data) -> TrainState:
    """Prune FC layers at each rate of ``schedule`` in turn, fine-tuning after each step.

    The last FC layer is left unpruned unless ``cfg.prune_last``.
    """
    schedule = tuple(schedule)
    check_schedule(schedule)
    if state.stage not in ("trained", "pruned"):
        raise StageOrderError(f"cannot prune a network in stage {state.stage!r}")
    if not schedule:
        return state
    if state.metadata.get("prune_rate", 0.0) >= schedule[0]:
        raise ValueError("schedule must continue above the rate already applied")
    X, y = data
    state = state.copy()
    layers = _compressible(state.graph)
    last = state.graph.layers[-1].name
    targets = [l for l in layers if cfg.prune_last or l.name != last]
    for rate in schedule:
        for l in targets:
            w = state.params[f"{l.name}.weight"]
            mask = prune_by_magnitude(w, rate, state.masks.get(l.name))
            state.masks[l.name] = mask
            w *= mask
        for name in list(state.adam_m):
            layer = name.split(".")[0]
            if name.endswith(".weight") and layer in state.masks:
                state.adam_m[name] *= state.masks[layer]
                state.adam_v[name] *= state.masks[layer]
        run_epochs(state, X, y, cfg, cfg.finetune_epochs, cfg.fine_tune_lr, f"prune@{rate:g}", decay=False)
    state.stage = "pruned"
    state.metadata["prune_schedule"] = list(state.metadata.get("prune_schedule", [])) + list(schedule)
    state.metadata["prune_rate"] = schedule[-1]
    return state


def quantize_finetune(state: TrainState, bit_width: int, cfg: TrainConfig, data,
                      eval_data=None) -> TrainState:
    """Replace every full-precision FC layer by its sparse quantized encoding, then fine-tune.

    Quantized weights are frozen; remaining parameters train at
    ``cfg.fine_tune_lr``. A warning is issued if accuracy on ``eval_data``
    (default: ``data``) drops by more than ``cfg.accuracy_budget``.
    """
    if state.stage not in ("trained", "pruned"):
        raise StageOrderError(f"cannot quantize a network in stage {state.stage!r}")
    X, y = data
    ev = eval_data if eval_data is not None else data
    before = evaluate(state, *ev)["top1"]
    state = state.copy()
    policies = {}
    for l in _compressible(state.graph):
        w = state.params.pop(f"{l.name}.weight")
        mask = state.masks.get(l.name)
        state.quantized[l.name] = compress_matrix(w, 0.0, bit_width, mask=mask)
        state.adam_m.pop(f"{l.name}.weight", None)
        state.adam_v.pop(f"{l.name}.weight", None)
        rate = state.metadata.get("prune_rate", 0.0) if mask is not None else 0.0
        policies[l.name] = Policy(PRUNED_QUANT, rate=rate, bit_width=bit_width)
    state.masks = {}
    state.graph = state.graph.with_policies(policies)
    run_epochs(state, X, y, cfg, cfg.finetune_epochs, cfg.fine_tune_lr, f"quant@{bit_width}b", decay=False)
    state.stage = "quantized"
    state.metadata["quant_bits"] = bit_width
    after = evaluate(state, *ev)["top1"]
    state.metadata["accuracy_before_quantization"] = before
    state.metadata["accuracy_after_quantization"] = after
    if before - after > cfg.accuracy_budget:
        warnings.warn(
            f"quantization to {bit_width} bits dropped accuracy from {before:.4f} to {after:.4f}",
            RuntimeWarning,
        )
    return state


def check_labels(g: ModelGraph, y):
    y = np.asarray(y)
    if y.size and (y.min() < 0 or y.max() >= g.n_classes):
        raise ValueError(f"labels span [{y.min()}, {y.max()}] but the model has {g.n_classes} classes")


def predict_logits(state: TrainState, X, engine: str = "dense") -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    out = [forward(state, X[i:i + EVAL_CHUNK], engine=engine)[0] for i in range(0, len(X), EVAL_CHUNK)]
    return np.concatenate(out) if out else np.zeros((0, state.graph.n_classes))


def evaluate(state: TrainState, X, y, k: int = 5, engine: str = "dense") -> dict:
    """Top-1 (and top-k when there are at least ``k`` classes) accuracy."""
    y = np.asarray(y, dtype=np.int64)
    check_labels(state.graph, y)
    logits = predict_logits(state, X, engine)
    # stable sort on negated logits: ties resolve to the lower class index
    order = np.argsort(-logits, axis=1, kind="stable")
    result = {"top1": float(np.mean(order[:, 0] == y)) if len(y) else 0.0}
    if state.graph.n_classes >= k:
        result[f"top{k}"] = float(np.mean((order[:, :k] == y[:, None]).any(axis=1))) if len(y) else 0.0
    return result


def run_pipeline(g: ModelGraph, data, cfg: TrainConfig, eval_data=None) -> dict:
    """Binary training, iterative pruning, quantization; returns the state after each stage."""
    base = train_binary_net(g, data, cfg)
    pruned = iterative_prune_finetune(base, cfg.prune_schedule, cfg, data)
    quant = quantize_finetune(pruned, cfg.quant_bits, cfg, data, eval_data)
    return {"trained": base, "pruned": pruned, "quantized": quant}
