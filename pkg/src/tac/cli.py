"""Command-line interface: ``tacnn train|compress|analyze|eval|verify``.

Exit codes: 0 success, 1 usage or configuration error, 2 data or checkpoint
error, 3 verification failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass, field, fields
from importlib import resources
from pathlib import Path

import numpy as np

from . import analyzer, checkpoint, train, verify
from .analyzer import DEFAULT_BITS, DEFAULT_SCHEDULE, Policy
from .compress import DEFAULT_INDEX_BITS
from .data import DataError, load_dataset
from .zoo import GRAPHS, get_graph

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_VERIFY = 0, 1, 2, 3

log = logging.getLogger("tac")


class UsageError(Exception):
    pass


@dataclass
class DatasetConfig:
    name: str = "digits"
    path: str | None = None
    limit: int | None = None


@dataclass
class PipelineConfig:
    graph: str = "digits-small"
    policy: str = "binary-conv"
    policy_overrides: dict = field(default_factory=dict)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    train: train.TrainConfig = field(default_factory=train.TrainConfig)
    out: str = "runs/tac"

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        if not isinstance(d, dict):
            raise UsageError("config must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(sorted(unknown))}")
        d = dict(d)
        ds = d.get("dataset", {})
        bad = set(ds) - {f.name for f in fields(DatasetConfig)}
        if bad:
            raise UsageError(f"unknown dataset keys: {', '.join(sorted(bad))}")
        d["dataset"] = DatasetConfig(**ds)
        try:
            d["train"] = train.TrainConfig.from_dict(d.get("train", {}))
        except (TypeError, ValueError) as exc:
            raise UsageError(str(exc)) from None
        return cls(**d)

    def to_dict(self) -> dict:
        # output location is deliberately not stored, so checkpoints don't depend on it
        return {
            "graph": self.graph,
            "policy": self.policy,
            "policy_overrides": dict(self.policy_overrides),
            "dataset": vars(self.dataset).copy(),
            "train": self.train.to_dict(),
        }

    def build_graph(self) -> analyzer.ModelGraph:
        try:
            g = get_graph(self.graph)
        except KeyError as exc:
            raise UsageError(exc.args[0]) from None
        g = analyzer.apply_preset(g, self.policy)
        try:
            overrides = {k: Policy.parse(v) for k, v in self.policy_overrides.items()}
            return g.with_policies(overrides)
        except (KeyError, ValueError) as exc:
            raise UsageError(f"bad policy override: {exc}") from None

    def check_paths(self):
        if self.dataset.name != "digits":
            if not self.dataset.path or not Path(self.dataset.path).is_dir():
                raise DataError(f"dataset directory {self.dataset.path!r} does not exist")


def shipped_configs() -> list:
    return sorted(p.name[:-5] for p in resources.files("tac.configs").iterdir()
                  if p.name.endswith(".json"))


def load_config(ref: str) -> PipelineConfig:
    path = Path(ref)
    if not path.exists():
        shipped = resources.files("tac.configs") / f"{ref}.json"
        if not shipped.is_file():
            raise UsageError(f"config {ref!r} not found; shipped configs: {', '.join(shipped_configs())}")
        text = shipped.read_text()
    else:
        text = path.read_text()
    try:
        return PipelineConfig.from_dict(json.loads(text))
    except json.JSONDecodeError as exc:
        raise UsageError(f"config is not valid JSON: {exc}") from None


def parse_rates(text: str | None):
    if text is None:
        return None
    text = text.strip()
    if not text:
        return ()
    try:
        rates = tuple(float(r) for r in text.split(","))
        train.check_schedule(rates)
    except ValueError as exc:
        raise UsageError(f"bad --rates: {exc}") from None
    return rates


def _write_log(path: Path, history, stages=None):
    with open(path, "w") as f:
        for h in history:
            if stages is None or h["stage"] in stages:
                f.write(f"{h['stage']}\t{h['epoch']}\t{h['loss']:.6f}\t{h['accuracy']:.6f}\n")


# -- commands ------------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.train.seed = args.seed
    if args.epochs is not None:
        cfg.train.epochs = args.epochs
    if args.out:
        cfg.out = args.out
    g = cfg.build_graph()
    cfg.check_paths()
    ds = load_dataset(cfg.dataset.name, cfg.dataset.path, cfg.dataset.limit)
    if ds.input_shape != g.input_shape:
        raise UsageError(f"graph {g.name} expects inputs {g.input_shape}, dataset has {ds.input_shape}")
    state = train.train_binary_net(g, ds.train, cfg.train)
    out = Path(cfg.out)
    checkpoint.save_state(state, out, cfg.to_dict())
    _write_log(out / "train.log", state.history)
    acc = train.evaluate(state, *ds.test)
    print(f"trained {g.name} for {cfg.train.epochs} epochs: "
          f"train accuracy {state.history[-1]['accuracy'] if state.history else float('nan'):.4f}, "
          f"test top-1 {acc['top1']:.4f}")
    print(f"checkpoint written to {out}")
    return EXIT_OK


def cmd_compress(args) -> int:
    state, cfg_dict = checkpoint.load_state(args.checkpoint)
    cfg = PipelineConfig.from_dict(cfg_dict) if cfg_dict else PipelineConfig()
    rates = parse_rates(args.rates)
    if rates is None:
        rates = cfg.train.prune_schedule
    bits = args.bits if args.bits is not None else cfg.train.quant_bits
    if args.finetune_epochs is not None:
        cfg.train.finetune_epochs = args.finetune_epochs
    if args.fine_tune_lr is not None:
        cfg.train.fine_tune_lr = args.fine_tune_lr
    if args.seed is not None:
        state.rng_state = np.random.default_rng(args.seed).bit_generator.state
    cfg.check_paths()
    ds = load_dataset(cfg.dataset.name, cfg.dataset.path, cfg.dataset.limit)
    if state.stage == "quantized":
        raise UsageError("checkpoint is already compressed")
    pruned = train.iterative_prune_finetune(state, rates, cfg.train, ds.train)
    quant = train.quantize_finetune(pruned, bits, cfg.train, ds.train, ds.test)
    quant.metadata["schedule"] = list(rates)
    quant.metadata["bits"] = bits
    out = Path(args.out or str(Path(args.checkpoint)) + "-compressed")
    checkpoint.save_state(quant, out, cfg.to_dict())
    _write_log(out / "compress.log", quant.history, None)
    acc = train.evaluate(quant, *ds.test)
    print(f"compressed with rates {list(rates)} and {bits}-bit codebooks: test top-1 {acc['top1']:.4f}")
    print(f"compressed model written to {out}")
    return EXIT_OK


def cmd_analyze(args) -> int:
    target = args.target
    rates = parse_rates(args.rates)
    if Path(target).is_dir():
        state, _ = checkpoint.load_state(target)
        g = state.graph
        if args.policy:
            g = analyzer.apply_preset(g, args.policy, rates if rates is not None else DEFAULT_SCHEDULE,
                                      args.bits, prune_last=args.prune_last)
    else:
        if target not in GRAPHS:
            raise UsageError(f"unknown graph {target!r}; known graphs: {', '.join(sorted(GRAPHS))}")
        g = analyzer.apply_preset(
            get_graph(target), args.policy or "full",
            rates if rates is not None else DEFAULT_SCHEDULE, args.bits, prune_last=args.prune_last,
        )
    report = analyzer.compare(
        analyzer.apply_preset(g, "full"), g, index_bits=args.index_bits,
        include_bias=args.include_bias, include_bn=args.include_bn,
    )
    sys.stdout.write(report.to_jsonl() if args.json else report.to_text())
    if args.out:
        Path(args.out).write_text(report.to_jsonl())
    return EXIT_OK


def cmd_eval(args) -> int:
    state, cfg_dict = checkpoint.load_state(args.checkpoint)
    cfg = PipelineConfig.from_dict(cfg_dict) if cfg_dict else PipelineConfig()
    cfg.check_paths()
    ds = load_dataset(cfg.dataset.name, cfg.dataset.path, cfg.dataset.limit)
    X, y = ds.test if args.split == "test" else ds.train
    result = train.evaluate(state, X, y, engine=args.engine)
    result.update(split=args.split, engine=args.engine, stage=state.stage)
    print(json.dumps(result, sort_keys=True))
    return EXIT_OK


def cmd_verify(args) -> int:
    results = verify.run_suites(args.seed, args.instances)
    ok = True
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{status} {r.name}: {r.instances} instances, {len(r.failures)} failures (seed {args.seed})")
        for f in r.failures[:5]:
            print(f"    {f}")
        ok &= r.passed
    return EXIT_OK if ok else EXIT_VERIFY


# -- parser ------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tacnn", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train the binary-conv network")
    p.add_argument("--config", required=True, help="config file or shipped config name")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("compress", help="prune and quantize the FC layers of a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--rates", help='comma-separated ascending pruning rates; "" skips pruning')
    p.add_argument("--bits", type=int)
    p.add_argument("--finetune-epochs", type=int)
    p.add_argument("--fine-tune-lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_compress)

    p = sub.add_parser("analyze", help="parameter, size and FLOPs report")
    p.add_argument("target", help="graph name or checkpoint directory")
    p.add_argument("--policy", choices=analyzer.PRESETS)
    p.add_argument("--rates", help="pruning schedule; the last rate applies")
    p.add_argument("--bits", type=int, default=DEFAULT_BITS)
    p.add_argument("--index-bits", type=int, default=DEFAULT_INDEX_BITS,
                   help="bits per stored column index of pruned layers (0 ignores index storage)")
    p.add_argument("--prune-last", action="store_true", help="also prune the last FC layer")
    p.add_argument("--include-bias", action="store_true")
    p.add_argument("--include-bn", action="store_true")
    p.add_argument("--json", action="store_true", help="print JSON lines instead of the table")
    p.add_argument("--out", help="write JSON lines report to this file")
    p.add_argument("--seed", type=int, help="accepted for uniformity; analysis is deterministic")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--split", choices=("test", "train"), default="test")
    p.add_argument("--engine", choices=("dense", "xnor"), default="dense")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("verify", help="randomized kernel and compression self-checks")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--instances", type=int, default=500)
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits on --help and on usage errors
        return exc.code
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"tacnn: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, checkpoint.CheckpointError, FileNotFoundError) as exc:
        print(f"tacnn: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (train.StageOrderError, train.TrainingDiverged) as exc:
        print(f"tacnn: error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
