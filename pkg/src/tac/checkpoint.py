"""Checkpoint directories: a versioned JSON manifest plus one binary blob per array.

Layout::

    manifest.json             format, version, graph, stage, counters, rng state,
                              metadata, config, and the blob index
    blobs/<name>.tensor       dense tensors (tac.tensor.tensor_to_bytes)
    blobs/<layer>.bits        packed sign bits of binary layers (BitTensor)
    blobs/<layer>.sq          sparse quantized FC layers (SparseQuantLayer)

Everything is written deterministically so identical states give
byte-identical directories.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .analyzer import BINARY, ModelGraph
from .binarize import sign_binarize
from .compress import SparseQuantLayer
from .tensor import BitTensor, tensor_from_bytes, tensor_to_bytes
from .train import STAGES, TrainState

FORMAT = "tac-checkpoint"
VERSION = 1
MANIFEST = "manifest.json"


class CheckpointError(ValueError):
    pass


def _dump_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=1) + "\n"


def save_state(state: TrainState, directory, config: dict | None = None) -> Path:
    directory = Path(directory)
    blobs = directory / "blobs"
    blobs.mkdir(parents=True, exist_ok=True)
    for old in blobs.iterdir():
        old.unlink()
    index = {"params": {}, "buffers": {}, "masks": {}, "adam_m": {}, "adam_v": {},
             "quantized": {}, "bits": {}}

    def put(group, name, data: bytes, suffix):
        fname = f"{group}.{name}.{suffix}"
        (blobs / fname).write_bytes(data)
        index[group][name] = fname

    for group in ("params", "buffers", "adam_m", "adam_v"):
        for name, arr in sorted(getattr(state, group).items()):
            put(group, name, tensor_to_bytes(arr), "tensor")
    for name, mask in sorted(state.masks.items()):
        put("masks", name, tensor_to_bytes(mask.astype(np.float64)), "tensor")
    for name, layer in sorted(state.quantized.items()):
        put("quantized", name, layer.to_bytes(), "sq")
    for l in state.graph.layers:
        if l.policy.kind == BINARY:
            put("bits", l.name, sign_binarize(state.params[f"{l.name}.weight"]).to_bytes(), "bits")

    manifest = {
        "format": FORMAT,
        "version": VERSION,
        "graph": state.graph.to_dict(),
        "stage": state.stage,
        "step": state.step,
        "epoch": state.epoch,
        "rng_state": state.rng_state,
        "history": state.history,
        "metadata": state.metadata,
        "config": config or {},
        "blobs": index,
    }
    (directory / MANIFEST).write_text(_dump_json(manifest))
    return directory


def read_manifest(directory) -> dict:
    path = Path(directory) / MANIFEST
    if not path.exists():
        raise CheckpointError(f"{directory} has no {MANIFEST}")
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"corrupt manifest: {exc}") from None
    if manifest.get("format") != FORMAT:
        raise CheckpointError(f"{path} is not a {FORMAT} manifest")
    if manifest.get("version") != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {manifest.get('version')}")
    return manifest


def load_state(directory) -> tuple[TrainState, dict]:
    """Load a checkpoint; returns the state and the stored pipeline config."""
    directory = Path(directory)
    manifest = read_manifest(directory)
    blobs = directory / "blobs"
    try:
        index = manifest["blobs"]
        graph = ModelGraph.from_dict(manifest["graph"])

        def get(group, parse):
            out = {}
            for name, fname in index[group].items():
                path = blobs / fname
                if not path.exists():
                    raise CheckpointError(f"missing blob {fname}")
                out[name] = parse(path.read_bytes())
            return out

        state = TrainState(
            graph=graph,
            params=get("params", tensor_from_bytes),
            buffers=get("buffers", tensor_from_bytes),
            masks={k: v.astype(bool) for k, v in get("masks", tensor_from_bytes).items()},
            quantized=get("quantized", SparseQuantLayer.from_bytes),
            adam_m=get("adam_m", tensor_from_bytes),
            adam_v=get("adam_v", tensor_from_bytes),
            step=int(manifest["step"]),
            epoch=int(manifest["epoch"]),
            rng_state=manifest["rng_state"],
            stage=manifest["stage"],
            history=manifest["history"],
            metadata=manifest["metadata"],
        )
        bits = get("bits", BitTensor.from_bytes)
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"corrupt checkpoint {directory}: {exc}") from None
    if state.stage not in STAGES:
        raise CheckpointError(f"unknown stage {state.stage!r}")
    _check_consistency(state, bits)
    return state, manifest.get("config", {})


def _check_consistency(state: TrainState, bits: dict):
    for l in state.graph.layers:
        key = f"{l.name}.weight"
        if l.name in state.quantized:
            q = state.quantized[l.name]
            if q.shape != (l.out_features, l.in_features):
                raise CheckpointError(f"{l.name}: stored layer shape {q.shape} does not match graph")
            continue
        if key not in state.params:
            raise CheckpointError(f"{l.name}: weights missing")
        if l.policy.kind == BINARY:
            if l.name not in bits or bits[l.name] != sign_binarize(state.params[key]):
                raise CheckpointError(f"{l.name}: packed bits disagree with shadow weights")
