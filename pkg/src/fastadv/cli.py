"""Command-line entry point: ``fastadv {train,eval,detect,plotdata}``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

from .config import parse_config
from .data import DataFormatError
from .harness import (MetricsFormatError, emit_plot_data, evaluate_checkpoint, read_metrics_csv,
                      run_experiment)
from .attacks import PRESETS
from .metrics import DetectorThresholds, detect_catastrophic_overfitting
from .models import CheckpointError
from .trainers import ConfigError


def _config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--seed", type=int, help="overrides train.seed")
    p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                   help="set a config field, e.g. train.beta=0 (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fastadv", description="Fast adversarial training runner.")
    ap.add_argument("-v", "--verbose", action="store_true", help="log every epoch")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train with per-epoch evaluation")
    _config_args(p)
    p.add_argument("--out", help="output directory (overrides run.out_dir)")
    p.add_argument("--resume", help="checkpoint written with run.checkpoint_every")

    p = sub.add_parser("eval", help="evaluate a checkpoint under attack presets")
    _config_args(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--attack", action="append", choices=sorted(PRESETS),
                   help="attack preset (repeatable; default: fgsm and pgd10)")
    p.add_argument("--out", help="write the result JSON here as well as to stdout")

    p = sub.add_parser("detect", help="catastrophic-overfitting verdict for a metrics.csv")
    p.add_argument("--metrics", required=True)
    p.add_argument("--start-epoch", type=int, default=1,
                   help="ignore earlier epochs (set to the budget warm-up length)")
    p.add_argument("--out", help="write the verdict JSON here as well as to stdout")

    p = sub.add_parser("plotdata", help="reshape metrics.csv into epoch,series,value rows")
    p.add_argument("--metrics", required=True)
    p.add_argument("--kind", required=True, choices=("acc_vs_epoch", "delta_norm"))
    p.add_argument("--out", required=True)
    return ap


def _emit(obj: dict, out) -> None:
    text = json.dumps(obj, indent=2)
    print(text)
    if out:
        Path(out).write_text(text + "\n")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        if args.command == "train":
            cfg = parse_config(args.config, args.override, seed=args.seed, out=args.out)
            return run_experiment(cfg, resume=args.resume)
        if args.command == "eval":
            cfg = parse_config(args.config, args.override, seed=args.seed)
            attacks = tuple(args.attack or ("fgsm", "pgd10"))
            result = evaluate_checkpoint(args.checkpoint, cfg, attacks)
            _emit(result, args.out)
            return 0
        if args.command == "detect":
            history = read_metrics_csv(args.metrics)
            if not history:
                raise MetricsFormatError(f"{args.metrics}: no data rows")
            verdict = detect_catastrophic_overfitting(
                history, DetectorThresholds(start_epoch=args.start_epoch))
            _emit(asdict(verdict), args.out)
            return 0
        n = emit_plot_data(args.metrics, args.kind, args.out)
        print(f"wrote {n} rows to {args.out}")
        return 0
    except (ConfigError, MetricsFormatError, DataFormatError, CheckpointError,
            FileNotFoundError) as exc:
        print(f"fastadv {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
