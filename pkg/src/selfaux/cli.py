"""Command-line entry point: ``selfaux {gen-data,train,sweep,report,gradcheck}``.

Exit codes: 0 success, 1 usage or configuration error, 2 nothing but
divergence (every trial of a sweep or the single trial of ``train``),
3 gradient-check breach.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from .datasets import DataConfig, save_dataset, write_synthetic_csv
from .exceptions import ConfigurationError
from .harness import (
    GRADCHECK_LOSSES,
    GRADCHECK_THRESHOLD,
    EmptyReportError,
    ExperimentConfig,
    SweepSpec,
    cmd_gradcheck,
    emit_csv,
    parse_csv,
    report_frontier,
    run_sweep,
    run_trial,
)
from .model import AUX_KINDS, save_checkpoint
from .pareto import write_frontier_csv

EXIT_OK, EXIT_USAGE, EXIT_DIVERGED, EXIT_GRADCHECK = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _seed(text: str) -> int:
    value = int(text)
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return value


def _load_json(path):
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from exc


def _out_dir(args) -> Path:
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _with_seed(config: ExperimentConfig, seed):
    return config if seed is None else dataclasses.replace(config, seed=seed)


def cmd_gen_data(args) -> int:
    if not args.config:
        raise ConfigurationError("gen-data needs --config (a dataset or experiment config)")
    raw = _load_json(args.config)
    data = DataConfig.from_dict(raw["dataset"] if "dataset" in raw else raw)
    if args.seed is not None:
        data = dataclasses.replace(data, seed=args.seed, synthetic=dataclasses.replace(data.synthetic, seed=args.seed))
    train, test = data.materialize(Path(args.config).parent)
    out = _out_dir(args)
    for name, ds in (("train", train), ("test", test)):
        save_dataset(ds, out / f"{name}.bin")
        if args.csv and data.kind == "synthetic":
            write_synthetic_csv(ds, out / f"{name}.csv")
    print(f"wrote {train.n} train and {test.n} test examples to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    if not args.config:
        raise ConfigurationError("train needs --config")
    config = _with_seed(ExperimentConfig.from_dict(_load_json(args.config)), args.seed)
    record, estimators = run_trial(config, Path(args.config).parent, return_estimators=True)
    out = _out_dir(args)
    payload = dataclasses.asdict(record)
    if not args.timing:
        payload["wall_ms"] = None
    (out / "record.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    if record.status == "ok":
        if len(estimators) == 1:
            save_checkpoint(estimators[0].model_, out / "model.ckpt")
        else:
            for t, est in enumerate(estimators):
                save_checkpoint(est.model_, out / f"model_task{t + 1}.ckpt")
    print(emit_csv([record], timing=args.timing), end="")
    if record.status == "diverged":
        return EXIT_DIVERGED
    if record.status == "failed":
        print(record.message, file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


def cmd_sweep(args) -> int:
    if not args.config:
        raise ConfigurationError("sweep needs --config")
    spec = SweepSpec.from_dict(_load_json(args.config))
    if args.seed is not None:
        spec = dataclasses.replace(spec, seeds=(args.seed,))
    cells = spec.size()
    workers = args.parallelism or spec.parallelism
    print(f"sweep: {cells} trials, parallelism {workers}", file=sys.stderr)
    records = run_sweep(spec, Path(args.config).parent, parallelism=workers)
    out = _out_dir(args)
    emit_csv(records, out / "records.csv", timing=args.timing)
    counts = {s: sum(r.status == s for r in records) for s in ("ok", "diverged", "failed")}
    print(f"wrote {out / 'records.csv'}: " + ", ".join(f"{v} {k}" for k, v in counts.items()), file=sys.stderr)
    if counts["diverged"] == len(records):
        return EXIT_DIVERGED
    return EXIT_OK


def cmd_report(args) -> int:
    metrics = tuple(args.metrics.split(",")) if args.metrics else ("test_metric_1", "test_metric_2")
    records = parse_csv(Path(args.records))
    ref = tuple(float(v) for v in args.ref.split(",")) if args.ref else None
    accuracy = tuple(args.accuracy_columns.split(",")) if args.accuracy_columns else ()
    try:
        report = report_frontier(records, metrics, ref=ref, accuracy_columns=accuracy)
    except EmptyReportError as exc:
        print(f"report: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    out = _out_dir(args)
    write_frontier_csv(report.frontier, out / "frontier.csv")
    summary = report.summary()
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(json.dumps(summary, indent=2))
    return EXIT_OK


def cmd_gradcheck_cli(args) -> int:
    opts = _load_json(args.config) if args.config else {}
    allowed = {"presets", "aux_kinds", "losses", "batch", "h", "max_entries", "seed"}
    unknown = set(opts) - allowed
    if unknown:
        raise ConfigurationError(f"unknown gradcheck keys: {sorted(unknown)}")
    if args.seed is not None:
        opts["seed"] = args.seed
    opts.setdefault("aux_kinds", list(AUX_KINDS))
    opts.setdefault("losses", list(GRADCHECK_LOSSES))
    rows = cmd_gradcheck(**opts)
    lines = ["preset,aux,loss,max_rel_error,checked,skipped_kinks,status"]
    for r in rows:
        lines.append(f"{r.preset},{r.aux},{r.loss},{r.max_error:.3e},{r.checked},{r.skipped},{'ok' if r.ok else 'BREACH'}")
    text = "\n".join(lines) + "\n"
    print(text, end="")
    if args.out:
        (_out_dir(args) / "gradcheck.csv").write_text(text)
    breaches = [r for r in rows if not r.ok]
    if breaches:
        print(f"{len(breaches)} cell(s) at or above {GRADCHECK_THRESHOLD:g}", file=sys.stderr)
        return EXIT_GRADCHECK
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="selfaux", description="Multi-task training with self-auxiliary towers and Pareto-frontier experiments.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    def common(p, config_required=False):
        p.add_argument("--config", required=config_required, help="JSON config file")
        p.add_argument("--seed", type=_seed, help="override the seed (u64)")
        p.add_argument("--out", help="output directory (default: current directory)")

    p = sub.add_parser("gen-data", help="write a synthetic or composited dataset")
    common(p, True)
    p.add_argument("--csv", action="store_true", help="also write CSV (synthetic data only)")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="run one trial; writes record.json and a checkpoint")
    common(p, True)
    p.add_argument("--no-timing", dest="timing", action="store_false", help="leave wall_ms empty")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep", help="run a sweep; writes records.csv")
    common(p, True)
    p.add_argument("--parallelism", type=int, help="concurrent trials (overrides the sweep file)")
    p.add_argument("--no-timing", dest="timing", action="store_false", help="leave wall_ms empty")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="frontier CSV and summary JSON from a records CSV")
    p.add_argument("records", help="records CSV written by sweep")
    p.add_argument("--out", help="output directory")
    p.add_argument("--metrics", help="two metric columns, comma separated (default test_metric_1,test_metric_2)")
    p.add_argument("--ref", help="hypervolume reference point x,y (default: max x 1.1)")
    p.add_argument("--accuracy-columns", help="metric columns holding accuracies to turn into error rates")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("gradcheck", help="finite-difference check of every preset, aux kind and loss")
    common(p)
    p.set_defaults(func=cmd_gradcheck_cli)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if not getattr(args, "func", None):
        parser.print_help(sys.stderr)
        return EXIT_USAGE
    if getattr(args, "parallelism", None) is not None and args.parallelism < 1:
        parser.error("--parallelism must be >= 1")
    try:
        return args.func(args)
    except (ConfigurationError, ValueError, OSError) as exc:
        print(f"selfaux {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
