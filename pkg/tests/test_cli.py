import json

import numpy as np
import pytest

from tac import cli, xnor
from tac.checkpoint import load_state
from tac.compress import decode


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def dir_bytes(d):
    return {p.relative_to(d).as_posix(): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("ck") / "train"
    assert cli.main(["train", "--config", "digits-small", "--epochs", "2", "--out", str(out)]) == 0
    return out


def test_train_writes_checkpoint_and_log(trained):
    assert (trained / "manifest.json").exists()
    lines = (trained / "train.log").read_text().splitlines()
    assert len(lines) == 2
    stage, epoch, loss, acc = lines[1].split("\t")
    assert stage == "train" and epoch == "2" and 0 <= float(acc) <= 1 and float(loss) > 0


def test_train_deterministic(trained, tmp_path):
    assert cli.main(["train", "--config", "digits-small", "--epochs", "2", "--out", str(tmp_path / "again")]) == 0
    assert dir_bytes(trained) == dir_bytes(tmp_path / "again")


def test_default_config_train_accuracy(tmp_path, capsys):
    code, out, _ = run(capsys, "train", "--config", "digits-small", "--out", tmp_path / "full")
    assert code == 0
    last = (tmp_path / "full" / "train.log").read_text().splitlines()[-1]
    assert float(last.split("\t")[3]) > 0.9


def test_compress_defaults(trained, tmp_path, capsys):
    out = tmp_path / "c"
    code, text, _ = run(capsys, "compress", trained, "--finetune-epochs", "1", "--out", out)
    assert code == 0, text
    state, _ = load_state(out)
    assert state.stage == "quantized"
    assert state.metadata["schedule"] == [0.2, 0.4, 0.6, 0.7, 0.75]
    assert state.metadata["bits"] == 4
    fc1 = state.quantized["fc1"]
    assert fc1.n_kept / (fc1.rows * fc1.cols) == pytest.approx(0.25, abs=1 / fc1.cols)
    assert fc1.bit_width == 4
    # six fine-tuning phases of one epoch each
    assert len((out / "compress.log").read_text().splitlines()) == 2 + 6


def test_compress_quantize_only(trained, tmp_path, capsys):
    out = tmp_path / "q"
    code, _, _ = run(capsys, "compress", trained, "--rates", "", "--bits", "3",
                     "--finetune-epochs", "0", "--out", out)
    assert code == 0
    state, _ = load_state(out)
    assert all(q.n_kept == q.rows * q.cols for q in state.quantized.values())
    assert state.metadata["schedule"] == [] and state.metadata["bits"] == 3


def test_compress_roundtrip_matches_memory(trained, tmp_path):
    from tac.data import load_digits_dataset
    from tac.train import TrainConfig, iterative_prune_finetune, quantize_finetune

    out = tmp_path / "r"
    assert cli.main(["compress", str(trained), "--rates", "0.5", "--finetune-epochs", "1",
                     "--fine-tune-lr", "1e-4", "--out", str(out)]) == 0
    state, cfg = load_state(trained)
    tc = TrainConfig.from_dict({**cfg["train"], "finetune_epochs": 1, "fine_tune_lr": 1e-4})
    ds = load_digits_dataset()
    mem = quantize_finetune(iterative_prune_finetune(state, [0.5], tc, ds.train), 4, tc, ds.train, ds.test)
    disk, _ = load_state(out)
    for name in mem.quantized:
        np.testing.assert_array_equal(decode(disk.quantized[name]), decode(mem.quantized[name]))


def test_compress_deterministic(trained, tmp_path):
    for d in ("a", "b"):
        assert cli.main(["compress", str(trained), "--rates", "0.5", "--finetune-epochs", "1",
                         "--seed", "3", "--out", str(tmp_path / d)]) == 0
    assert dir_bytes(tmp_path / "a") == dir_bytes(tmp_path / "b")


def test_compress_corrupt_checkpoint(tmp_path, capsys):
    (tmp_path / "bad").mkdir()
    (tmp_path / "bad" / "manifest.json").write_text("garbage")
    code, _, err = run(capsys, "compress", tmp_path / "bad")
    assert code == 2 and "data error" in err


def test_eval_both_engines(trained, capsys):
    results = []
    for engine in ("dense", "xnor"):
        code, out, _ = run(capsys, "eval", trained, "--engine", engine)
        assert code == 0
        results.append(json.loads(out))
    assert results[0]["top1"] == results[1]["top1"]
    assert set(results[0]) >= {"top1", "top5", "stage"}


def test_analyze_full_alexnet(capsys):
    code, out, _ = run(capsys, "analyze", "alexnet", "--policy", "full")
    assert code == 0
    assert "total" in out and "60.95M" in out and "1.45G" in out


def test_analyze_json_and_out(tmp_path, capsys):
    code, out, _ = run(capsys, "analyze", "alexnet", "--policy", "tac", "--json", "--out", tmp_path / "r.jsonl")
    assert code == 0
    records = [json.loads(line) for line in out.splitlines()]
    assert records[-1]["name"] == "total"
    assert (tmp_path / "r.jsonl").read_text() == out


def test_analyze_deterministic(tmp_path, capsys):
    outs = []
    for _ in range(2):
        code, out, _ = run(capsys, "analyze", "vgg9", "--policy", "tac", "--seed", "5", "--json")
        outs.append(out)
    assert outs[0] == outs[1]


def test_analyze_checkpoint(trained, capsys):
    code, out, _ = run(capsys, "analyze", trained, "--index-bits", "0")
    assert code == 0 and "binary" in out


def test_analyze_unknown_graph(capsys):
    code, _, err = run(capsys, "analyze", "resnet")
    assert code == 1 and "alexnet" in err and "vgg9" in err


def test_usage_errors(capsys, tmp_path):
    assert run(capsys, "frobnicate")[0] == 1
    assert run(capsys, "analyze", "alexnet", "--rates", "0.5,0.2")[0] == 1
    assert run(capsys, "train", "--config", "no-such-config")[0] == 1
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"graph": "digits-small", "trian": {}}))
    code, _, err = run(capsys, "train", "--config", bad)
    assert code == 1 and "trian" in err
    bad.write_text(json.dumps({"graph": "nope"}))
    assert run(capsys, "train", "--config", bad)[0] == 1


def test_missing_dataset_exit_2(capsys, tmp_path):
    cfg = tmp_path / "m.json"
    cfg.write_text(json.dumps({"graph": "mnist-small", "dataset": {"name": "mnist", "path": str(tmp_path / "none")}}))
    code, _, err = run(capsys, "train", "--config", cfg)
    assert code == 2 and "does not exist" in err


def test_verify_passes_and_is_deterministic(capsys):
    code, out1, _ = run(capsys, "verify", "--seed", "4", "--instances", "60")
    assert code == 0 and out1.count("PASS") == 3 and "seed 4" in out1
    _, out2, _ = run(capsys, "verify", "--seed", "4", "--instances", "60")
    assert out1 == out2


def test_verify_fault_injection(capsys, monkeypatch):
    real = xnor.binary_conv2d_accumulate

    def off_by_one(*args, **kwargs):
        out = real(*args, **kwargs)
        out.flat[0] += 2
        return out

    monkeypatch.setattr(xnor, "binary_conv2d_accumulate", off_by_one)
    code, out, _ = run(capsys, "verify", "--instances", "20")
    assert code == 3
    assert "FAIL kernel-equivalence" in out and "instance 0" in out


def test_shipped_configs_parse():
    names = cli.shipped_configs()
    assert {"digits-small", "mnist-small", "cifar-small"} <= set(names)
    for n in names:
        cfg = cli.load_config(n)
        cfg.build_graph().validate()
