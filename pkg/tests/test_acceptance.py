"""Acceptance criteria, one test each; every test records a PASS/FAIL line.

Run directly (``python3 tests/test_acceptance.py``) or through pytest, which
repeats the lines in an "acceptance criteria" summary section.
"""

import json
import math
import os
import sys
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np
import pytest

from conftest import ACCEPTANCE
from tac import cli, verify
from tac.analyzer import ConvLayer, FCLayer, ModelGraph
from tac.compress import (SparseQuantLayer, compress_matrix, decode, encode, kmeans_quantize,
                          prune_by_magnitude)
from tac.data import export_digits_idx
from tac.reference import sort_prune_mask
from tac.train import forward, init_state, loss_and_grads
from tac import nn


@contextmanager
def criterion(number, title):
    info = {}
    t0 = time.perf_counter()
    try:
        yield info
    except BaseException as exc:
        line = f"FAIL criterion {number} ({title}): {type(exc).__name__}: {str(exc).splitlines()[0] if str(exc) else ''}"
        ACCEPTANCE.append(line)
        print(line)
        raise
    detail = "; ".join(f"{k}={v}" for k, v in info.items())
    line = f"PASS criterion {number} ({title}) in {time.perf_counter() - t0:.1f}s" + (f": {detail}" if detail else "")
    ACCEPTANCE.append(line)
    print(line)


def run_cli(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def dir_bytes(d):
    return {p.relative_to(d).as_posix(): p.read_bytes() for p in sorted(Path(d).rglob("*")) if p.is_file()}


def within_stated_precision(ours, stated, unit, tol):
    """True if ``ours`` lies within ``tol`` (relative) of the values that round to ``stated``.

    ``unit`` is the place value of the last digit of the stated figure.
    """
    lo, hi = stated - unit / 2, stated + unit / 2
    gap = 0.0 if lo <= ours <= hi else min(abs(ours - lo), abs(ours - hi))
    return gap <= tol * stated


# -- 1 -------------------------------------------------------------------------

def test_criterion_1_kernel_equivalence():
    with criterion(1, "kernel equivalence") as info:
        t0 = time.perf_counter()
        rng = np.random.default_rng(2024)
        failures = []
        for i in range(500):
            for check in (verify.check_conv, verify.check_linear):
                msg = check(rng)
                if msg:
                    failures.append(f"{i}: {msg}")
        elapsed = time.perf_counter() - t0
        info.update(conv=500, linear=500, failures=len(failures), seconds=round(elapsed, 1))
        assert not failures, failures[:3]
        assert elapsed < 60


# -- 2 -------------------------------------------------------------------------

TABLE1 = {  # layer: (weights, unit, FLOPs, unit)
    "conv1": (35e3, 1e3, 211e6, 1e6),
    "conv2": (307e3, 1e3, 448e6, 1e6),
    "conv3": (885e3, 1e3, 299e6, 1e6),
    "conv4": (663e3, 1e3, 224e6, 1e6),
    "conv5": (442e3, 1e3, 150e6, 1e6),
    "fc6": (38e6, 1e6, 75e6, 1e6),
    "fc7": (17e6, 1e6, 34e6, 1e6),
    "fc8": (4e6, 1e6, 8e6, 1e6),
    "total": (61e6, 1e6, 1.5e9, 1e8),
}


def test_criterion_2_table1(capsys):
    with criterion(2, "AlexNet parameter and FLOPs table") as info:
        code, out, _ = run_cli(capsys, "analyze", "alexnet", "--policy", "full", "--json")
        assert code == 0
        rows = {r["name"]: r for r in map(json.loads, out.splitlines())}
        bad = []
        for name, (w, wu, f, fu) in TABLE1.items():
            if not within_stated_precision(rows[name]["weights"], w, wu, 0.03):
                bad.append(f"{name} weights {rows[name]['weights']} vs {w:g}")
            if not within_stated_precision(rows[name]["flops"], f, fu, 0.03):
                bad.append(f"{name} FLOPs {rows[name]['flops']} vs {f:g}")
        info.update(total_weights=rows["total"]["weights"], total_flops=f"{rows['total']['flops']:.4g}")
        assert not bad, bad


# -- 3 -------------------------------------------------------------------------

def test_criterion_3_table5(capsys):
    with criterion(3, "computation saving") as info:
        savings = {}
        for policy in ("xnor", "tac-xnor"):
            code, out, _ = run_cli(capsys, "analyze", "alexnet", "--policy", policy, "--json")
            assert code == 0
            savings[policy] = json.loads(out.splitlines()[-1])["computation_saving"]
        info.update(xnor=round(savings["xnor"], 3), tac_xnor=round(savings["tac-xnor"], 3))
        assert savings["xnor"] == pytest.approx(6.1, rel=0.05)
        assert savings["tac-xnor"] == pytest.approx(5.5, rel=0.05)


# -- 4 -------------------------------------------------------------------------

def test_criterion_4_table4_sizes(capsys):
    with criterion(4, "AlexNet model size and compression rate") as info:
        def total(policy, index_bits):
            code, out, _ = run_cli(capsys, "analyze", "alexnet", "--policy", policy,
                                   "--index-bits", index_bits, "--json")
            assert code == 0
            rec = json.loads(out.splitlines()[-1])
            return rec["bits"] / 8 / 2 ** 20, rec["compression_rate"]

        full, _ = total("full", 16)
        xnor, xnor_rate = total("xnor", 16)
        tac, tac_rate = total("tac-xnor", 0)
        tac16, _ = total("tac-xnor", 16)
        info.update(full_mib=round(full, 2), xnor_mib=round(xnor, 2), xnor_rate=round(xnor_rate, 2),
                    tac_mib=round(tac, 3), tac_rate=round(tac_rate, 2), tac_mib_16bit_index=round(tac16, 1))
        # "232M" agrees with 232.5 MiB at the stated (whole MiB, truncated) precision
        assert math.floor(full) == 232
        assert xnor == pytest.approx(22.6, rel=0.15) and xnor_rate == pytest.approx(10.3, rel=0.15)
        assert tac == pytest.approx(8.9, rel=0.15)
        assert tac_rate == pytest.approx(26.1, rel=0.15)


# -- 5 -------------------------------------------------------------------------

def test_criterion_5_pruning_oracle():
    with criterion(5, "pruning oracle") as info:
        t0 = time.perf_counter()
        rng = np.random.default_rng(5)
        mismatches = nest_violations = 0
        for _ in range(1000):
            n = int(rng.integers(1, 400))
            w = np.round(rng.normal(size=n), int(rng.integers(0, 4)))
            rates = np.sort(rng.random(4) * 0.999)
            prev = None
            for r in rates:
                m = prune_by_magnitude(w, float(r))
                mismatches += not np.array_equal(m, sort_prune_mask(w, float(r)))
                if prev is not None:
                    nest_violations += bool(np.any(m & ~prev))
                prev = m
        elapsed = time.perf_counter() - t0
        info.update(vectors=1000, mismatches=mismatches, nesting_violations=nest_violations,
                    seconds=round(elapsed, 1))
        assert mismatches == 0 and nest_violations == 0
        assert elapsed < 60


# -- 6 -------------------------------------------------------------------------

def test_criterion_6_quantization():
    with criterion(6, "quantization properties") as info:
        t0 = time.perf_counter()
        rng = np.random.default_rng(6)
        lossless = mse = roundtrip = 0
        for _ in range(200):
            b = int(rng.integers(1, 6))
            levels = np.unique(rng.normal(size=int(rng.integers(1, 2 ** b + 1))).astype(np.float32))
            vals = rng.choice(levels.astype(np.float64), size=int(rng.integers(1, 100)))
            cb, codes = kmeans_quantize(vals, b)
            lossless += not np.array_equal(cb.levels[codes], vals)
        for _ in range(100):
            w = rng.standard_t(4, size=int(rng.integers(16, 400)))
            errs = []
            for b in range(1, 7):
                cb, codes = kmeans_quantize(w, b)
                errs.append(float(np.mean((w - cb.levels[codes]) ** 2)))
            mse += any(e2 > e1 for e1, e2 in zip(errs, errs[1:]))
        for _ in range(200):
            shape = tuple(int(v) for v in rng.integers(1, 40, 2))
            w = rng.normal(size=shape)
            rate, b = float(rng.random() * 0.95), int(rng.integers(1, 7))
            mask = prune_by_magnitude(w, rate)
            cb, codes = kmeans_quantize(w[mask], b) if mask.any() else (None, None)
            layer = compress_matrix(w, rate, b)
            expected = np.zeros(shape)
            if mask.any():
                expected[mask] = cb.levels[codes]
                layer2 = encode(w, mask, cb, codes)
                roundtrip += layer2 != layer
            roundtrip += not np.array_equal(decode(layer), expected)
            roundtrip += SparseQuantLayer.from_bytes(layer.to_bytes()) != layer
        elapsed = time.perf_counter() - t0
        info.update(lossless_failures=lossless, mse_increases=mse, roundtrip_failures=roundtrip,
                    seconds=round(elapsed, 1))
        assert lossless == 0 and mse == 0 and roundtrip == 0
        assert elapsed < 60


# -- 7 -------------------------------------------------------------------------

def _numeric(state, x, y, name, eps=1e-6):
    p = state.params[name]
    g = np.zeros_like(p)
    for i in np.ndindex(p.shape):
        old = p[i]
        p[i] = old + eps
        up = nn.cross_entropy(forward(state, x, train=True)[0], y)[0]
        p[i] = old - eps
        down = nn.cross_entropy(forward(state, x, train=True)[0], y)[0]
        p[i] = old
        g[i] = (up - down) / (2 * eps)
    return g


def test_criterion_7_gradient_check():
    with criterion(7, "gradient check") as info:
        t0 = time.perf_counter()
        rng = np.random.default_rng(7)
        # binary conv (1->2, 3x3) -> BN -> ReLU -> FC 8->3, 49 parameters
        g = ModelGraph("gc", (1, 4, 4), (
            ConvLayer("conv1", 1, 2, 3, 4, 4),
            FCLayer("fc1", 8, 3),
        ))
        from tac.analyzer import apply_preset
        g = apply_preset(g, "binary-conv", first_last_full=False)
        state = init_state(g, seed=7)
        state.params["conv1.bn.gamma"] = rng.normal(1.0, 0.3, 2)
        state.params["conv1.bn.beta"] = rng.normal(0.0, 0.3, 2)
        n_params = sum(v.size for v in state.params.values())
        x = rng.normal(size=(6, 1, 4, 4))
        y = rng.integers(0, 3, 6)
        _, _, grads = loss_and_grads(state, x, y)
        checked = [n for n in state.params if n != "conv1.weight"]
        worst = 0.0
        for name in checked:
            num = _numeric(state, x, y, name)
            rel = np.abs(grads[name] - num) / np.maximum(np.maximum(np.abs(grads[name]), np.abs(num)), 1e-12)
            rel[np.maximum(np.abs(grads[name]), np.abs(num)) < 1e-10] = 0.0
            worst = max(worst, float(rel.max()))
        elapsed = time.perf_counter() - t0
        info.update(params=n_params, checked=sum(state.params[n].size for n in checked),
                    max_rel_error=f"{worst:.2e}", seconds=round(elapsed, 2))
        assert n_params <= 50
        assert worst <= 1e-4
        assert elapsed < 60


# -- 8 -------------------------------------------------------------------------

def _fc_bits(out):
    return sum(r["bits"] for r in map(json.loads, out.splitlines()) if r["kind"] == "fc")


def test_criterion_8_desk_pipeline(tmp_path, capsys):
    with criterion(8, "desk-scale pipeline") as info:
        t0 = time.perf_counter()
        mnist = os.environ.get("TAC_MNIST_DIR")
        if mnist:
            config = cli.load_config("mnist-small").to_dict()
            config["dataset"]["path"] = mnist
        else:
            # bundled 8x8 digits written as MNIST IDX files and read back by the MNIST loader
            config = cli.load_config("digits-small").to_dict()
            config["dataset"] = {"name": "mnist", "path": str(export_digits_idx(tmp_path / "idx"))}
        cfg_path = tmp_path / "config.json"
        cfg_path.write_text(json.dumps(config))
        base, comp = tmp_path / "base", tmp_path / "tac"

        assert run_cli(capsys, "train", "--config", cfg_path, "--out", base)[0] == 0
        assert run_cli(capsys, "compress", base, "--out", comp)[0] == 0
        accs = {}
        for name, ck in (("baseline", base), ("tac", comp)):
            code, out, _ = run_cli(capsys, "eval", ck)
            assert code == 0
            accs[name] = json.loads(out)["top1"]
        sizes = {}
        for idx in (0, 16):
            code, out, _ = run_cli(capsys, "analyze", comp, "--index-bits", idx, "--json")
            assert code == 0
            full_fc = sum(r["full_bits"] for r in map(json.loads, out.splitlines()) if r["kind"] == "fc")
            sizes[idx] = full_fc / _fc_bits(out)
        elapsed = time.perf_counter() - t0
        info.update(data="MNIST" if mnist else "digits via IDX", baseline=accs["baseline"],
                    tac=accs["tac"], fc_shrink=round(sizes[0], 2), fc_shrink_16bit_index=round(sizes[16], 2),
                    minutes=round(elapsed / 60, 2))
        assert accs["tac"] >= accs["baseline"] - 0.02
        assert sizes[0] >= 8
        assert elapsed < 30 * 60


# -- 9 -------------------------------------------------------------------------

def test_criterion_9_determinism(tmp_path, capsys):
    with criterion(9, "determinism") as info:
        outputs = []
        for run in ("a", "b"):
            d = tmp_path / run
            got = {}
            assert run_cli(capsys, "train", "--config", "digits-small", "--epochs", "2",
                           "--seed", "11", "--out", d / "ck")[0] == 0
            assert run_cli(capsys, "compress", d / "ck", "--finetune-epochs", "1", "--seed", "11",
                           "--out", d / "comp")[0] == 0
            got["analyze"] = run_cli(capsys, "analyze", d / "comp", "--seed", "11", "--json",
                                     "--out", d / "report.jsonl")[1]
            got["analyze-table"] = run_cli(capsys, "analyze", "alexnet", "--policy", "tac")[1]
            got["eval"] = run_cli(capsys, "eval", d / "comp", "--engine", "xnor")[1]
            got["verify"] = run_cli(capsys, "verify", "--seed", "11", "--instances", "50")[1]
            got["files"] = dir_bytes(d)
            outputs.append(got)
        a, b = outputs
        differing = [k for k in a if a[k] != b[k]]
        info.update(compared=", ".join(sorted(a)), files=len(a["files"]))
        assert not differing, differing


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v", "-s"]))
