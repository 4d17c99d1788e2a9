"""Parameter, model-size and FLOPs accounting for layer graphs under precision policies.

Conventions:

* a full-precision multiply-accumulate costs 2 FLOPs;
* a binary (XNOR + popcount) MAC costs 1/64 FLOP, plus one FLOP per output for
  the scale multiply when the layer is scaled;
* a pruned, quantized FC layer costs 2 FLOPs per kept weight;
* sizes are 32 bits per full-precision weight, 1 bit per binary weight plus 32
  per scale, and :func:`tac.compress.storage_bits` for pruned quantized layers.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Optional, Union

from .compress import DEFAULT_INDEX_BITS, n_pruned, storage_bits

FULL_BITS = 32
BINARY_MACS_PER_FLOP = 64
MIB = 2 ** 20

FULL, BINARY, PRUNED_QUANT = "full", "binary", "pruned_quant"


@dataclass(frozen=True)
class Policy:
    kind: str = FULL
    scaled: bool = True
    rate: float = 0.0
    bit_width: int = 4

    def __post_init__(self):
        if self.kind not in (FULL, BINARY, PRUNED_QUANT):
            raise ValueError(f"unknown precision policy {self.kind!r}")
        if not 0.0 <= self.rate < 1.0:
            raise ValueError(f"pruning rate must be in [0, 1), got {self.rate}")
        if self.bit_width < 1:
            raise ValueError("bit width must be positive")

    def __str__(self):
        if self.kind == BINARY:
            return "binary" if self.scaled else "binary(noscale)"
        if self.kind == PRUNED_QUANT:
            return f"pruned_quant(rate={self.rate:g},b={self.bit_width})"
        return "full"

    @classmethod
    def parse(cls, text: str) -> "Policy":
        """Inverse of ``str(policy)``."""
        text = text.strip()
        if text == "full":
            return cls()
        if text == "binary":
            return cls(BINARY)
        if text == "binary(noscale)":
            return cls(BINARY, scaled=False)
        if text.startswith("pruned_quant(") and text.endswith(")"):
            args = dict(kv.split("=") for kv in text[len("pruned_quant("):-1].split(","))
            return cls(PRUNED_QUANT, rate=float(args["rate"]), bit_width=int(args["b"]))
        raise ValueError(f"cannot parse policy {text!r}")


@dataclass(frozen=True)
class ConvLayer:
    name: str
    in_channels: int
    out_channels: int
    kernel: int
    input_h: int
    input_w: int
    stride: int = 1
    padding: int = 0
    groups: int = 1
    pool: Optional[tuple] = None  # (size, stride) max-pool after the conv
    policy: Policy = field(default_factory=Policy)

    @property
    def output_h(self) -> int:
        return (self.input_h + 2 * self.padding - self.kernel) // self.stride + 1

    @property
    def output_w(self) -> int:
        return (self.input_w + 2 * self.padding - self.kernel) // self.stride + 1

    @property
    def out_shape(self) -> tuple:
        h, w = self.output_h, self.output_w
        if self.pool:
            size, stride = self.pool
            h, w = (h - size) // stride + 1, (w - size) // stride + 1
        return (self.out_channels, h, w)

    @property
    def weights(self) -> int:
        return self.out_channels * (self.in_channels // self.groups) * self.kernel ** 2

    @property
    def macs(self) -> int:
        return self.weights * self.output_h * self.output_w

    @property
    def outputs(self) -> int:
        return self.out_channels * self.output_h * self.output_w


@dataclass(frozen=True)
class FCLayer:
    name: str
    in_features: int
    out_features: int
    policy: Policy = field(default_factory=Policy)

    @property
    def out_shape(self) -> tuple:
        return (self.out_features,)

    @property
    def weights(self) -> int:
        return self.in_features * self.out_features

    @property
    def macs(self) -> int:
        return self.weights

    @property
    def outputs(self) -> int:
        return self.out_features

    @property
    def out_channels(self) -> int:
        return self.out_features


Layer = Union[ConvLayer, FCLayer]


@dataclass(frozen=True)
class ModelGraph:
    """Ordered conv/FC layers with one precision policy each.

    ``input_shape`` is ``(channels, height, width)``. Convolutions may only
    precede FC layers; the first FC layer flattens the last conv output.
    """

    name: str
    input_shape: tuple
    layers: tuple

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(self.input_shape))
        self.validate()

    def validate(self):
        if not self.layers:
            raise ValueError("graph has no layers")
        names = [l.name for l in self.layers]
        if len(set(names)) != len(names):
            raise ValueError("layer names must be unique")
        shape = self.input_shape
        seen_fc = False
        for layer in self.layers:
            if isinstance(layer, ConvLayer):
                if seen_fc:
                    raise ValueError(f"{layer.name}: convolution after a fully connected layer")
                if (layer.in_channels, layer.input_h, layer.input_w) != shape:
                    raise ValueError(
                        f"{layer.name}: expects input {(layer.in_channels, layer.input_h, layer.input_w)}, "
                        f"previous layer produces {shape}"
                    )
                if layer.in_channels % layer.groups or layer.out_channels % layer.groups:
                    raise ValueError(f"{layer.name}: channels not divisible by groups")
                if layer.output_h < 1 or layer.output_w < 1 or min(layer.out_shape[1:]) < 1:
                    raise ValueError(f"{layer.name}: output would be empty")
                if layer.policy.kind == PRUNED_QUANT:
                    raise ValueError(f"{layer.name}: pruned_quant applies to FC layers only")
            else:
                seen_fc = True
                if layer.in_features != math.prod(shape):
                    raise ValueError(
                        f"{layer.name}: expects {layer.in_features} inputs, "
                        f"previous layer produces {math.prod(shape)}"
                    )
            shape = layer.out_shape

    @property
    def n_classes(self) -> int:
        return self.layers[-1].out_shape[0]

    def layer(self, name: str) -> Layer:
        for l in self.layers:
            if l.name == name:
                return l
        raise KeyError(name)

    def with_policies(self, policies: dict) -> "ModelGraph":
        """Copy with selected layers' policies replaced (``name -> Policy``)."""
        unknown = set(policies) - {l.name for l in self.layers}
        if unknown:
            raise KeyError(f"unknown layers: {sorted(unknown)}")
        layers = [replace(l, policy=policies.get(l.name, l.policy)) for l in self.layers]
        return replace(self, layers=tuple(layers))

    def skeleton(self) -> tuple:
        return tuple(replace(l, policy=Policy()) for l in self.layers)

    def to_dict(self) -> dict:
        out = []
        for l in self.layers:
            d = {k: getattr(l, k) for k in l.__dataclass_fields__ if k != "policy"}
            d["type"] = "conv" if isinstance(l, ConvLayer) else "fc"
            if d.get("pool") is not None:
                d["pool"] = list(d["pool"])
            d["policy"] = str(l.policy)
            out.append(d)
        return {"name": self.name, "input_shape": list(self.input_shape), "layers": out}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelGraph":
        layers = []
        for spec in d["layers"]:
            spec = dict(spec)
            kind = spec.pop("type")
            spec["policy"] = Policy.parse(spec.get("policy", "full"))
            if kind == "conv":
                if spec.get("pool") is not None:
                    spec["pool"] = tuple(spec["pool"])
                layers.append(ConvLayer(**spec))
            elif kind == "fc":
                layers.append(FCLayer(**spec))
            else:
                raise ValueError(f"unknown layer type {kind!r}")
        return cls(d["name"], tuple(d["input_shape"]), tuple(layers))


# -- policy presets ------------------------------------------------------------

PRESETS = ("full", "xnor", "bnn", "binary-conv", "binary-conv-bnn", "tac", "tac-xnor", "tac-bnn")
DEFAULT_SCHEDULE = (0.2, 0.4, 0.6, 0.7, 0.75)
DEFAULT_BITS = 4


def apply_preset(g: ModelGraph, preset: str, rates=DEFAULT_SCHEDULE,
                 bits: int = DEFAULT_BITS, first_last_full: bool = True,
                 prune_last: bool = False) -> ModelGraph:
    """Assign per-layer policies for a named configuration.

    ``xnor``/``bnn`` binarize every layer, except the first and last when
    ``first_last_full``. ``binary-conv``/``binary-conv-bnn`` binarize convolutions
    (except the first when ``first_last_full``) and keep FC layers full
    precision; this is the network trained before compression.
    ``tac``/``tac-xnor``/``tac-bnn`` binarize convolutions the same way and
    prune + quantize FC layers
    at the final rate of ``rates``; the last FC layer is quantized but only
    pruned when ``prune_last``.
    """
    if preset not in PRESETS:
        raise ValueError(f"unknown policy preset {preset!r}; choose from {', '.join(PRESETS)}")
    rates = tuple(rates)
    final_rate = rates[-1] if rates else 0.0
    scaled = not preset.endswith("bnn")
    n = len(g.layers)
    policies = {}
    for i, l in enumerate(g.layers):
        edge = first_last_full and i in (0, n - 1)
        if preset == "full":
            p = Policy()
        elif preset in ("xnor", "bnn"):
            p = Policy() if edge else Policy(BINARY, scaled=scaled)
        elif isinstance(l, ConvLayer):
            p = Policy() if first_last_full and i == 0 else Policy(BINARY, scaled=scaled)
        elif preset.startswith("binary-conv"):
            p = Policy()
        else:
            rate = final_rate if (i < n - 1 or prune_last) else 0.0
            p = Policy(PRUNED_QUANT, rate=rate, bit_width=bits)
        policies[l.name] = p
    return g.with_policies(policies)


# -- accounting ----------------------------------------------------------------

def kept_weights(layer: Layer) -> int:
    if layer.policy.kind == PRUNED_QUANT:
        return layer.weights - n_pruned(layer.weights, layer.policy.rate)
    return layer.weights


def count_params(g: ModelGraph, include_bias: bool = False,
                 include_bn: bool = False) -> dict:
    """Per-layer parameter counts (weights, optionally biases and BN affine pairs)."""
    out = {}
    for l in g.layers:
        n = l.weights
        if include_bias:
            n += l.out_channels
        if include_bn and isinstance(l, ConvLayer):
            n += 2 * l.out_channels
        out[l.name] = n
    return out


def layer_flops(l: Layer) -> float:
    p = l.policy
    if p.kind == BINARY:
        return l.macs / BINARY_MACS_PER_FLOP + (l.outputs if p.scaled else 0)
    if p.kind == PRUNED_QUANT:
        return 2.0 * kept_weights(l)
    return 2.0 * l.macs


def count_flops(g: ModelGraph) -> dict:
    return {l.name: layer_flops(l) for l in g.layers}


def layer_bits(l: Layer, index_bits: int = DEFAULT_INDEX_BITS, include_bias: bool = False,
               include_bn: bool = False) -> int:
    p = l.policy
    if p.kind == BINARY:
        bits = l.weights + (FULL_BITS * l.out_channels if p.scaled else 0)
    elif p.kind == PRUNED_QUANT:
        kept = kept_weights(l)
        levels = min(2 ** p.bit_width, max(kept, 1))
        bits = storage_bits(kept, p.bit_width, levels, l.out_features, index_bits)
    else:
        bits = FULL_BITS * l.weights
    if include_bias:
        bits += FULL_BITS * l.out_channels
    if include_bn and isinstance(l, ConvLayer):
        bits += FULL_BITS * 2 * l.out_channels
    return bits


def model_size(g: ModelGraph, index_bits: int = DEFAULT_INDEX_BITS,
               include_bias: bool = False, include_bn: bool = False) -> tuple[dict, int]:
    """Per-layer storage bits and total bytes (rounded up)."""
    bits = {l.name: layer_bits(l, index_bits, include_bias, include_bn) for l in g.layers}
    return bits, math.ceil(sum(bits.values()) / 8)


@dataclass
class LayerRecord:
    name: str
    kind: str
    policy: str
    weights: int
    kept: int
    bits: int
    flops: float
    full_bits: int
    full_flops: float


@dataclass
class CompressionReport:
    graph: str
    layers: list
    total_weights: int
    total_bits: int
    total_flops: float
    full_bits: int
    full_flops: float
    index_bits: int

    @property
    def compression_rate(self) -> float:
        return self.full_bits / self.total_bits

    @property
    def computation_saving(self) -> float:
        return self.full_flops / self.total_flops

    @property
    def size_mib(self) -> float:
        return self.total_bits / 8 / MIB

    @property
    def full_size_mib(self) -> float:
        return self.full_bits / 8 / MIB

    def records(self) -> list:
        rows = [dict(vars(r)) for r in self.layers]
        rows.append({
            "name": "total", "kind": "total", "policy": "",
            "weights": self.total_weights, "kept": sum(r.kept for r in self.layers),
            "bits": self.total_bits, "flops": self.total_flops,
            "full_bits": self.full_bits, "full_flops": self.full_flops,
            "compression_rate": round(self.compression_rate, 6),
            "computation_saving": round(self.computation_saving, 6),
            "index_bits": self.index_bits,
        })
        return rows

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records())

    def to_text(self) -> str:
        header = ("layer", "policy", "weights", "kept", "size (KiB)", "FLOPs", "full FLOPs")
        rows = [
            (r.name, r.policy, _si(r.weights), _si(r.kept), f"{r.bits / 8 / 1024:.1f}",
             _si(r.flops), _si(r.full_flops))
            for r in self.layers
        ]
        rows.append(("total", "", _si(self.total_weights), _si(sum(r.kept for r in self.layers)),
                     f"{self.total_bits / 8 / 1024:.1f}", _si(self.total_flops),
                     _si(self.full_flops)))
        widths = [max(len(str(row[i])) for row in [header] + rows) for i in range(len(header))]
        lines = []
        for j, row in enumerate([header] + rows):
            cells = [str(c).ljust(w) if i < 2 else str(c).rjust(w)
                     for i, (c, w) in enumerate(zip(row, widths))]
            lines.append("  ".join(cells).rstrip())
            if j == 0 or j == len(rows) - 1:
                lines.append("-" * len(lines[-1]))
        lines.append(
            f"model size: {self.full_size_mib:.2f} MiB -> {self.size_mib:.3f} MiB "
            f"(compression rate {self.compression_rate:.1f}x, index bits {self.index_bits})"
        )
        lines.append(
            f"FLOPs: {self.full_flops:.3e} -> {self.total_flops:.3e} "
            f"(computation saving {self.computation_saving:.1f}x)"
        )
        return "\n".join(lines) + "\n"


def _si(x: float) -> str:
    for unit, scale in (("G", 1e9), ("M", 1e6), ("K", 1e3)):
        if abs(x) >= scale:
            return f"{x / scale:.2f}{unit}"
    return f"{x:g}"


def compare(g_full: ModelGraph, g_compressed: ModelGraph, index_bits: int = DEFAULT_INDEX_BITS,
            include_bias: bool = False, include_bn: bool = False) -> CompressionReport:
    """Size and FLOPs of ``g_compressed`` relative to ``g_full``.

    Both graphs must share layer names, types and dimensions.
    """
    if g_full.skeleton() != g_compressed.skeleton():
        raise ValueError(f"graphs {g_full.name!r} and {g_compressed.name!r} differ in structure")
    full_bits, _ = model_size(g_full, index_bits, include_bias, include_bn)
    bits, _ = model_size(g_compressed, index_bits, include_bias, include_bn)
    full_flops = count_flops(g_full)
    flops = count_flops(g_compressed)
    params = count_params(g_compressed, include_bias, include_bn)
    records = [
        LayerRecord(
            name=l.name,
            kind="conv" if isinstance(l, ConvLayer) else "fc",
            policy=str(l.policy),
            weights=params[l.name],
            kept=kept_weights(l),
            bits=bits[l.name],
            flops=flops[l.name],
            full_bits=full_bits[l.name],
            full_flops=full_flops[l.name],
        )
        for l in g_compressed.layers
    ]
    return CompressionReport(
        graph=g_compressed.name,
        layers=records,
        total_weights=sum(params.values()),
        total_bits=sum(bits.values()),
        total_flops=sum(flops.values()),
        full_bits=sum(full_bits.values()),
        full_flops=sum(full_flops.values()),
        index_bits=index_bits,
    )


def analyze(g: ModelGraph, preset: str = "full", index_bits: int = DEFAULT_INDEX_BITS,
            **preset_kwargs) -> CompressionReport:
    """Report for ``g`` under ``preset`` against its all-full-precision version."""
    return compare(apply_preset(g, "full"), apply_preset(g, preset, **preset_kwargs), index_bits)
