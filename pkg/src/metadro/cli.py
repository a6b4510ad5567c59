"""Command line entry point: ``metadro <command> [options]``.

Exit codes: 0 success, 2 invalid configuration or input, 3 numeric failure
during training, 4 file system error.
"""
from __future__ import annotations

import argparse
import io
import sys
from pathlib import Path
from typing import Sequence

from metadro.config import RunConfig, load_config
from metadro.dataset import clean_text, load_store, write_store
from metadro.errors import MetadroError, NumericError, TrainingAborted
from metadro.models import load_params, save_params
from metadro.synth import generate
from metadro.trainer import build_model, export_metrics, meta_test, meta_train, split_store, write_metrics_csv

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4
FORMAT_CHOICES = ("csv", "jsonl", "bin")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _positive_tasks(text: str) -> int:
    n = int(text)
    if n < 2:
        raise argparse.ArgumentTypeError(f"need at least 2 tasks, got {n}")
    return n


def _config_args(p: argparse.ArgumentParser, training: bool = True) -> None:
    p.add_argument("--config", type=Path, help="flat TOML run configuration")
    p.add_argument("--seed", type=int, help="overrides the config seed")
    if training:
        p.add_argument("--tasks", type=_positive_tasks, help="evaluation tasks T (>= 2)")
        p.add_argument("--mode", choices=("erm", "dro", "adjusted"), help="training objective")
        p.add_argument("--l2", type=float, help="l2 coefficient")
        p.add_argument("--order", choices=("first", "second"), help="MAML meta-gradient order")


def _store_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--store", type=Path, required=True, help="embedding store file")
    p.add_argument("--format", choices=FORMAT_CHOICES, help="store format (default: from suffix)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="metadro", description="Few-shot meta-learning with group-robust objectives.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-synth", help="write a synthetic grouped store")
    _config_args(p, training=False)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--format", choices=FORMAT_CHOICES, help="store format (default: from suffix)")

    p = sub.add_parser("train", help="meta-train and save a checkpoint")
    _config_args(p)
    _store_args(p)
    p.add_argument("--out", "--checkpoint", dest="out", type=Path, help="checkpoint to write")
    p.add_argument("--metrics", type=Path, help="metrics history (.csv or .json)")
    p.add_argument("--groups", type=Path, help="training group statistics CSV")

    p = sub.add_parser("eval", help="meta-test a checkpoint on the test split")
    _config_args(p)
    _store_args(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--out", "--metrics", dest="out", type=Path, help="also write the record here")

    p = sub.add_parser("inspect", help="class or group counts of a store")
    _store_args(p)
    p.add_argument("--by", choices=("class", "group"), default="class")

    p = sub.add_parser("clean-text", help="clean a text file line by line")
    p.add_argument("input", type=Path)
    p.add_argument("--stopwords", type=Path, help="one stopword per line")
    p.add_argument("--max-tokens", type=int, default=512)
    p.add_argument("--out", type=Path, help="output file (default: stdout)")

    p = sub.add_parser("dump-groups", help="test-time group losses of a checkpoint")
    _config_args(p)
    _store_args(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--out", type=Path, help="output CSV (default: stdout)")
    return parser


def _load_run_config(args) -> RunConfig:
    overrides = {"seed": args.seed}
    if hasattr(args, "mode"):
        overrides.update(mode=args.mode, l2=args.l2, maml_order=args.order, eval_tasks=args.tasks)
    return load_config(args.config, overrides)


def _load_store(args):
    return load_store(args.store, args.format)


def _emit(text: str, out: Path | None) -> None:
    if out is None:
        sys.stdout.write(text)
    else:
        out.write_text(text, encoding="utf-8")


def cmd_gen_synth(args) -> int:
    config = _load_run_config(args)
    store = generate(config.synth)
    write_store(store, args.out, args.format)
    print(f"wrote {len(store)} records, {len(store.classes)} classes, dim {store.dim} to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    run = _load_run_config(args)
    store = _load_store(args)

    def report(rec, selected):
        print(f"iter {rec.iteration} selected {selected or '-'} | {rec.format_row()}", flush=True)

    result = meta_train(run.train, store, on_eval=report)
    final = result.history[-1]
    label = f"{run.train.model} {run.train.dro.mode}"
    print(final.format_table(label))
    if args.out is not None:
        save_params(result.params, args.out)
    if args.metrics is not None:
        export_metrics(result.history, args.metrics)
    if args.groups is not None:
        result.stats.write_csv(args.groups)
    return EXIT_OK


def _evaluate(args):
    run = _load_run_config(args)
    store = _load_store(args)
    params = load_params(args.checkpoint)
    expected = build_model(run.train, store.dim).param_shapes()
    got = {n: tuple(v.shape) for n, v in params.items()}
    if got != expected:
        raise MetadroError(f"checkpoint parameters {got} do not match the configured model {expected}")
    test = split_store(store, run.train).test
    return meta_test(params, run.train, test.store, class_pool=test.pool)


def cmd_eval(args) -> int:
    rec = _evaluate(args)
    buf = io.StringIO()
    write_metrics_csv([rec], buf)
    sys.stdout.write(buf.getvalue())
    if args.out is not None:
        export_metrics([rec], args.out)
    return EXIT_OK


def cmd_dump_groups(args) -> int:
    buf = io.StringIO()
    _evaluate(args).group_stats().write_csv(buf)
    _emit(buf.getvalue(), args.out)
    return EXIT_OK


def cmd_inspect(args) -> int:
    store = _load_store(args)
    if len(store) == 0:
        raise MetadroError(f"{args.store} holds no records")
    counts = store.class_counts() if args.by == "class" else store.group_counts()
    lines = [f"{args.by},n"] + [f"{k},{v}" for k, v in counts.items()]
    print("\n".join(lines))
    print(f"# {len(store)} records, dim {store.dim}", file=sys.stderr)
    return EXIT_OK


def cmd_clean_text(args) -> int:
    if args.max_tokens < 0:
        raise MetadroError("--max-tokens must be >= 0")
    stop = set()
    if args.stopwords is not None:
        stop = {w.strip() for w in args.stopwords.read_text(encoding="utf-8").splitlines() if w.strip()}
    lines = args.input.read_text(encoding="utf-8").splitlines()
    cleaned = [clean_text(line, stop, args.max_tokens) for line in lines]
    _emit("".join(c + "\n" for c in cleaned), args.out)
    return EXIT_OK


COMMANDS = {
    "gen-synth": cmd_gen_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "inspect": cmd_inspect,
    "clean-text": cmd_clean_text,
    "dump-groups": cmd_dump_groups,
}


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (TrainingAborted, NumericError) as exc:
        print(f"error: training aborted: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (MetadroError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
