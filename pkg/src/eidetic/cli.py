"""``eidetic`` command-line tool.

Every subcommand accepts ``--config PATH`` (JSON), ``--seed`` and
``--out-dir``; explicit flags override the config file. Config layout::

    {"config_version": 1, "seed": 0,
     "model": {ModelConfig keys}, "train": {TrainConfig keys},
     "data": {"train": 8, "test": 4, "points": 512},
     "comm": {"M": 32, "C": 256, "H": 8, "ranks": 4, "points": [1000, ...]}}

Files written under ``--out-dir``:

    gen             train/sample_XXXX.tpp, test/..., train_manifest.json, test_manifest.json
    train           train_log.csv, model.tppc, run_config.json
    eval            metrics.json
    diagnose-kl     kl_by_layer.csv (+ slice_weights.csv with --export-weights)
    bench-comm      comm.csv
    check-parallel  parallel_check.txt
    ablation        ablation.csv
    selftest        selftest.txt

Exit codes: 0 success, 1 invalid input or a failed check, 2 internal error.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from . import __version__
from . import dataio as D
from .diagnostics import ablation_csv, ablation_matrix, diagnose_kl, slice_weights_csv
from .errors import ConfigError, ValidationError
from .model import ModelConfig, load_checkpoint
from .parallel import comm_rows_to_csv, comm_volume_report, layer_comm_scalars, measure_layer_comm, \
    serial_parallel_check
from .selftest import run_selftest
from .train import TrainConfig, evaluate, model_predictor, train

CONFIG_VERSION = 1
CONFIG_SECTIONS = {"config_version", "seed", "model", "train", "data", "comm"}
DATA_DEFAULTS = {"train": 8, "test": 4, "points": 512}
COMM_DEFAULTS = {"M": 32, "C": 256, "H": 8, "ranks": 4, "points": [10**3, 10**4, 10**5, 10**6]}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def _int_list(text: str) -> list[int]:
    try:
        return [int(float(v)) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def load_config(path) -> dict:
    if path is None:
        return {"config_version": CONFIG_VERSION}
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("config_version") != CONFIG_VERSION:
        raise ConfigError(f"config must be a JSON object with \"config_version\": {CONFIG_VERSION}")
    unknown = set(doc) - CONFIG_SECTIONS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    return doc


class Run:
    """Resolved settings for one invocation (config file, then flags)."""

    def __init__(self, args):
        self.args = args
        self.doc = load_config(args.config)
        self.seed = args.seed if args.seed is not None else int(self.doc.get("seed", 0))
        self.out = Path(args.out_dir)

    def section(self, name: str, defaults: dict) -> dict:
        extra = set(self.doc.get(name, {})) - set(defaults)
        if extra:
            raise ConfigError(f"unknown keys in config section {name!r}: {sorted(extra)}")
        return {**defaults, **self.doc.get(name, {})}

    def model_config(self, d_in: int | None = None, d_out: int | None = None) -> ModelConfig:
        values = dict(self.doc.get("model", {}))
        if d_in is not None:
            values.setdefault("d_in", d_in)
        if d_out is not None:
            values.setdefault("d_out", d_out)
        if self.args.seed is not None or "seed" not in values:
            values["seed"] = self.seed
        return ModelConfig.from_dict(values)

    def train_config(self, **overrides) -> TrainConfig:
        values = dict(self.doc.get("train", {}))
        if self.args.seed is not None or "seed" not in values:
            values["seed"] = self.seed
        values.update({k: v for k, v in overrides.items() if v is not None})
        return TrainConfig.from_dict(values)

    def write(self, name: str, text: str) -> Path:
        self.out.mkdir(parents=True, exist_ok=True)
        path = self.out / name
        path.write_text(text)
        return path


def _data(args, split: str) -> D.DatasetManifest:
    if args.data is None:
        raise ValidationError("--data DIR (output of `eidetic gen`) is required")
    path = Path(args.data) / f"{split}_manifest.json"
    if not path.is_file():
        raise ValidationError(f"{path} does not exist; run `eidetic gen` first")
    return D.read_manifest(path)


def _checkpoint(args):
    if args.checkpoint is None:
        raise ValidationError("--checkpoint PATH is required")
    if not Path(args.checkpoint).is_file():
        raise ValidationError(f"checkpoint {args.checkpoint} does not exist")
    return load_checkpoint(args.checkpoint)


def cmd_gen(run: Run) -> int:
    data = run.section("data", DATA_DEFAULTS)
    a = run.args
    n_train, n_test, points = a.train or data["train"], a.test or data["test"], a.points or data["points"]
    if n_train < 1 or n_test < 1:
        raise ValidationError("--train and --test must be >= 1")
    train_set = D.gen_sphere_dataset(n_train, points, seed=run.seed)
    test_set = D.gen_sphere_dataset(n_test, points, seed=run.seed + 1)
    tm, sm = D.write_dataset(run.out, train_set, test_set, {"generator": "ellipsoid", "seed": run.seed,
                                                              "points": points})
    print(f"wrote {n_train} train and {n_test} test samples: {tm}, {sm}")
    return 0


def cmd_train(run: Run) -> int:
    manifest = _data(run.args, "train")
    samples = manifest.load()
    model_cfg = run.model_config(len(manifest.input_channels), len(manifest.output_channels))
    cfg = run.train_config(epochs=run.args.epochs, lr=run.args.lr, ranks=run.args.ranks)
    result = train(model_cfg, samples, manifest.normalization, cfg, out_dir=run.out)
    run.write("run_config.json", json.dumps({"config_version": CONFIG_VERSION, "seed": run.seed,
                                             "model": model_cfg.to_dict(), "train": cfg.to_dict()}, indent=2) + "\n")
    print(f"epoch 1 loss {result.losses[0]:.6g}, final loss {result.losses[-1]:.6g}; wrote {result.checkpoint}")
    return 0


def cmd_eval(run: Run) -> int:
    params, cfg = _checkpoint(run.args)
    manifest = _data(run.args, "test")
    report = evaluate(model_predictor(params, cfg, manifest.normalization), manifest.load(),
                      field_names=manifest.output_channels, kl_report=run.args.kl_report)
    path = run.write("metrics.json", report.to_json())
    print(" ".join(f"rel_l2[{k}]={v:.6g}" for k, v in report.rel_l2.items()) + f"; wrote {path}")
    return 0


def cmd_diagnose_kl(run: Run) -> int:
    params, cfg = _checkpoint(run.args)
    manifest = _data(run.args, "test")
    samples = manifest.load()
    report = diagnose_kl(params, cfg, samples, manifest.normalization, run.args.layers)
    path = run.write("kl_by_layer.csv", report.to_csv())
    if run.args.export_weights:
        if len(run.args.export_weights) != 2:
            raise ValidationError("--export-weights takes LAYER,HEAD")
        layer, head = run.args.export_weights
        run.write("slice_weights.csv", slice_weights_csv(params, cfg, samples[0], manifest.normalization,
                                                         layer, head))
    print(f"mean KL {report.mean:.6g} over layers {report.layers}; wrote {path}")
    return 0


def cmd_bench_comm(run: Run) -> int:
    comm = run.section("comm", COMM_DEFAULTS)
    a = run.args
    M, C, H = a.M or comm["M"], a.C or comm["C"], a.H or comm["H"]
    ranks = a.ranks[0] if a.ranks else comm["ranks"]
    points = a.points or comm["points"]
    rows = comm_volume_report(M, C, H, ranks, points)
    if a.materialize:
        ledger = measure_layer_comm(a.materialize, ranks, M, C, H, seed=run.seed)
        measured = ledger.layer_totals()[0]
        if measured != layer_comm_scalars(ranks, M, C, H):
            print(f"FAIL ledger measured {measured} scalars at N={a.materialize}")
            return 1
        print(f"ledger at N={a.materialize}: {measured} scalars ({measured * 8} bytes) per layer")
    path = run.write("comm.csv", comm_rows_to_csv(rows))
    sys.stdout.write(comm_rows_to_csv(rows))
    print(f"wrote {path}")
    return 0


def cmd_check_parallel(run: Run) -> int:
    cfg = run.model_config()
    if "model" not in run.doc:
        cfg = replace(cfg, L=2, H=4, C=32, M=8, d_in=6, d_out=1)
    results = serial_parallel_check(cfg, run.args.n, run.args.ranks or [1, 2, 4, 8], seed=run.seed)
    lines = [r.line() for r in results]
    run.write("parallel_check.txt", "\n".join(lines) + "\n")
    print("\n".join(lines))
    return 0 if all(r.passed for r in results) else 1


def cmd_ablation(run: Run) -> int:
    train_m, test_m = _data(run.args, "train"), _data(run.args, "test")
    base = run.model_config(len(train_m.input_channels), len(train_m.output_channels))
    cfg = run.train_config(epochs=run.args.epochs, timing=False)
    rows = ablation_matrix(base, train_m.load(), test_m.load(), train_m.normalization, cfg)
    text = ablation_csv(rows)
    path = run.write("ablation.csv", text)
    sys.stdout.write(text)
    print(f"wrote {path}")
    return 0


def cmd_selftest(run: Run) -> int:
    results = run_selftest()
    lines = [r.line() for r in results]
    run.write("selftest.txt", "\n".join(lines) + "\n")
    print("\n".join(lines))
    return 0 if all(r.passed for r in results) else 1


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="eidetic", description="Physics-Attention with eidetic states: data, training, "
                                                 "evaluation and diagnostics.")
    parser.add_argument("--version", action="version", version=f"eidetic {__version__}")
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON config file (see module docs for keys)")
    common.add_argument("--seed", type=int, help="seed for data, initialisation and training noise")
    common.add_argument("--out-dir", default="out", help="directory for outputs (default: out)")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen", parents=[common], help="synthesise an ellipsoid dataset")
    p.add_argument("--train", type=int)
    p.add_argument("--test", type=int)
    p.add_argument("--points", type=int)
    p.set_defaults(fn=cmd_gen)

    p = sub.add_parser("train", parents=[common], help="train a model on a generated dataset")
    p.add_argument("--data", help="dataset directory written by gen")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--ranks", type=int, help="simulated ranks per sample")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="metrics report for a checkpoint on the test split")
    p.add_argument("--checkpoint")
    p.add_argument("--data")
    p.add_argument("--kl-report", help="path of a KL CSV to reference in the report")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("diagnose-kl", parents=[common], help="slice-weight KL against uniform per layer/head")
    p.add_argument("--checkpoint")
    p.add_argument("--data")
    p.add_argument("--layers", type=_int_list, help="1-based layers, e.g. 1,3")
    p.add_argument("--export-weights", type=_int_list, metavar="LAYER,HEAD",
                   help="also write per-point weights of one layer/head for the first test sample")
    p.set_defaults(fn=cmd_diagnose_kl)

    p = sub.add_parser("bench-comm", parents=[common], help="communication volume per layer vs point count")
    p.add_argument("--ranks", type=_int_list)
    p.add_argument("--points", type=_int_list)
    p.add_argument("--M", type=int)
    p.add_argument("--C", type=int)
    p.add_argument("--H", type=int)
    p.add_argument("--materialize", type=int, metavar="N", help="also run one layer at N points and check the ledger")
    p.set_defaults(fn=cmd_bench_comm)

    p = sub.add_parser("check-parallel", parents=[common], help="serial vs simulated-rank equivalence")
    p.add_argument("--ranks", type=_int_list)
    p.add_argument("--n", type=int, default=64)
    p.set_defaults(fn=cmd_check_parallel)

    p = sub.add_parser("ablation", parents=[common], help="train the four ablation variants")
    p.add_argument("--data")
    p.add_argument("--epochs", type=int)
    p.set_defaults(fn=cmd_ablation)

    p = sub.add_parser("selftest", parents=[common], help="run the fast invariant suite")
    p.set_defaults(fn=cmd_selftest)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    try:
        return args.fn(Run(args))
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
