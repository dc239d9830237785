"""Command-line entry point: ``unetseg {train,predict,evaluate,plot-loss,make-synthetic}``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import load_config
from .errors import (
    ConfigError,
    DataError,
    DivergedLossError,
    FormatError,
    InvalidConfigError,
    ShapeMismatchError,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_DIVERGED = 4


def _cmd_train(args) -> int:
    from .train import train

    cfg = load_config(args.config)
    result = train(cfg, resume=args.resume)
    print(f"finished {len(result.history)} epoch(s); artifacts in {result.checkpoint_dir}")
    if result.history:
        last = result.history[-1]
        print(f"last epoch {last.epoch}: train_loss={last.train_loss:.4f} val_loss={last.val_loss:.4f} "
              f"val_dice_mean={last.val_dice_mean:.4f}")
    return EXIT_OK


def _cmd_predict(args) -> int:
    from .train import predict

    mask = predict(args.checkpoint, args.input, args.output, threshold=args.threshold)
    print(f"wrote {args.output} ({mask.shape[1]}x{mask.shape[0]}, {int(mask.sum())} foreground pixels)")
    return EXIT_OK


def _cmd_evaluate(args) -> int:
    from .train import evaluate

    mode = args.dice_mode.replace("-", "_")
    output = args.output or str(Path(args.checkpoint).with_suffix("")) + "_eval.csv"
    report = evaluate(args.checkpoint, args.manifest, dice_mode=mode, threshold=args.threshold, output_csv=output)
    for name, d in report["per_image"]:
        print(f"{name}\t{d:.4f}")
    print(f"mean Dice ({args.dice_mode}) over {report['count']} image(s): {report['mean']:.4f}")
    print(f"report written to {output}")
    return EXIT_OK


def _cmd_plot(args) -> int:
    from .plot import emit_loss_curve

    emit_loss_curve(args.metrics, args.output)
    print(f"wrote {args.output}")
    return EXIT_OK


def _cmd_synthetic(args) -> int:
    from .synthetic import make_circles_dataset, write_dataset

    samples = make_circles_dataset(args.count, args.size, args.seed)
    manifest = write_dataset(samples, args.output)
    print(f"wrote {args.count} samples and {manifest}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="unetseg", description="From-scratch UNet binary segmentation")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress per epoch")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--resume", help="training checkpoint to continue from")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("predict", help="segment one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.set_defaults(func=_cmd_predict)

    p = sub.add_parser("evaluate", help="mean Dice over a manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--dice-mode", choices=["standard", "paper-literal"], default="standard")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--output", help="per-image CSV (default: <checkpoint>_eval.csv)")
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("plot-loss", help="render train/val loss curves")
    p.add_argument("--metrics", required=True)
    p.add_argument("--output", required=True)
    p.set_defaults(func=_cmd_plot)

    p = sub.add_parser("make-synthetic", help="write a synthetic circles dataset")
    p.add_argument("--output", required=True)
    p.add_argument("--count", type=int, default=100)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_synthetic)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ConfigError, InvalidConfigError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergedLossError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (DataError, FormatError, ShapeMismatchError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
