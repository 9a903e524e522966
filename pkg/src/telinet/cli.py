"""Command-line entry point: train, evaluate, predict-series, summary, make-fixture.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .checkpoint import CheckpointError, load_checkpoint
from .dataset import DatasetError
from .fixture import make_fixture
from .models import TeliNetConfig, VGG16Config, build_telinet, build_vgg16
from .pipeline import (
    TrainConfig,
    evaluate,
    predict_series,
    train,
    write_predictions_csv,
    write_report,
    write_series_csv,
)
from .tensor import NumericalError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        raise UsageError(f"{self.prog}: {message}")


def _parser() -> argparse.ArgumentParser:
    p = _Parser(prog="telinet", description="Shallow CNN for COVID/non-COVID CT-slice classification.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--model", choices=("telinet", "vgg16"), default="telinet")
    t.add_argument("--data", required=True, type=Path)
    t.add_argument("--epochs", required=True, type=int)
    t.add_argument("--batch-size", type=int, default=32)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--lr-decay", type=float, default=0.7)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--channels", type=int, choices=(1, 3))
    t.add_argument("--dropout", type=float, default=0.10)
    t.add_argument("--dropout-last-dense-only", action="store_true",
                   help="apply dropout after the second dense block only")
    t.add_argument("--leaky-alpha", type=float, default=0.3)
    t.add_argument("--threshold", type=float, default=0.5)
    t.add_argument("--out", type=Path, default=Path("runs"))
    t.add_argument("--deterministic", action="store_true", help="single-threaded, fixed reduction order")
    t.add_argument("--workers", type=int, default=0, help="image decoding threads")
    t.add_argument("--prefetch", type=int, default=1, help="batches decoded ahead")

    e = sub.add_parser("evaluate", help="score a labeled split")
    e.add_argument("--checkpoint", required=True, type=Path)
    e.add_argument("--data", required=True, type=Path)
    e.add_argument("--split", default="validation")
    e.add_argument("--threshold", type=float, default=0.5)
    e.add_argument("--batch-size", type=int, default=32)
    e.add_argument("--out", type=Path, default=Path("."))

    s = sub.add_parser("predict-series", help="majority-vote labels for test series")
    s.add_argument("--checkpoint", required=True, type=Path)
    s.add_argument("--test", required=True, type=Path)
    s.add_argument("--threshold", type=float, default=0.5)
    s.add_argument("--batch-size", type=int, default=32)
    s.add_argument("--out", type=Path, default=Path("series_predictions.csv"))

    m = sub.add_parser("summary", help="print the layer table")
    m.add_argument("--model", choices=("telinet", "vgg16"), default="telinet")
    m.add_argument("--channels", type=int, choices=(1, 3))

    f = sub.add_parser("make-fixture", help="write a synthetic dataset")
    f.add_argument("--out", required=True, type=Path)
    f.add_argument("--seed", type=int, default=0)
    return p


def _cmd_train(args) -> int:
    config = TrainConfig(
        model=args.model, data_root=args.data, epochs=args.epochs, batch_size=args.batch_size,
        initial_lr=args.lr, lr_decay=args.lr_decay, seed=args.seed, channels=args.channels,
        dropout_rate=args.dropout, dropout_after_both_dense=not args.dropout_last_dense_only,
        leaky_alpha=args.leaky_alpha, threshold=args.threshold, out_dir=args.out,
        deterministic=args.deterministic, workers=args.workers, prefetch=args.prefetch,
        verbose=args.verbose,
    )
    try:
        config.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    result = train(config)
    for log in result.logs:
        line = f"epoch {log.epoch} lr={log.learning_rate:.6g} loss={log.train_loss:.6f} " \
               f"val_macro_f1={log.validation.macro_f1:.4f}"
        if log.validation_series is not None:
            line += f" val_series_macro_f1={log.validation_series.macro_f1:.4f}"
        print(line)
    if result.best_checkpoint is not None:
        print(f"best checkpoint: {result.best_checkpoint}")
    return EXIT_OK


def _cmd_evaluate(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    config = TrainConfig(threshold=args.threshold, batch_size=args.batch_size)
    result = evaluate(ckpt.model, args.data, args.split, config)
    args.out.mkdir(parents=True, exist_ok=True)
    write_report(result.report, args.out / f"{args.split}_report")
    write_predictions_csv(result.predictions, args.out / f"{args.split}_predictions.csv")
    sys.stdout.write(result.report.to_text())
    if result.series_report is not None:
        write_report(result.series_report, args.out / f"{args.split}_series_report")
        print(f"series_macro_f1={result.series_report.macro_f1}")
    return EXIT_OK


def _cmd_predict_series(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    config = TrainConfig(threshold=args.threshold, batch_size=args.batch_size)
    rows = predict_series(ckpt.model, args.test, config)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    write_series_csv(rows, args.out)
    print(f"wrote {len(rows)} series to {args.out}")
    return EXIT_OK


def _cmd_summary(args) -> int:
    if args.model == "telinet":
        model = build_telinet(0, TeliNetConfig(channels=args.channels or 1))
    else:
        model = build_vgg16(0, VGG16Config(channels=args.channels or 3))
    print(model.summary())
    return EXIT_OK


def _cmd_make_fixture(args) -> int:
    out = make_fixture(args.out, seed=args.seed)
    print(f"fixture written to {out}")
    return EXIT_OK


COMMANDS = {
    "train": _cmd_train,
    "evaluate": _cmd_evaluate,
    "predict-series": _cmd_predict_series,
    "summary": _cmd_summary,
    "make-fixture": _cmd_make_fixture,
}


def main(argv: list[str] | None = None) -> int:
    try:
        args = _parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DatasetError, CheckpointError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
