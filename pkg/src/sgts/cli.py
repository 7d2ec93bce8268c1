"""Command-line front end.

Subcommands: gen-data, train, eval, infer, report. Exit codes: 0 success,
1 usage/config error, 2 data error, 3 numerical abort.
"""

from __future__ import annotations

import argparse
import csv
import io
import os
import sys

import numpy as np

from .autograd import Tensor
from .backbone import forward
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, parse_config
from .data import (RasterError, generate_dataset, load_split, normalize,
                   read_ppm, write_pgm, write_ppm)
from .metrics import (ConfusionTally, accumulate, mdice, miou, per_class_dice,
                      per_class_iou)
from .report import render_curves
from .trainer import NumericalAbort, run_training

CSV_HEADER = ["epoch", "phase", "alpha", "tau", "lr", "loss_sup", "loss_cons",
              "loss_total", "val_miou", "val_mdice", "pseudo_coverage"]

# Overlay palette: stroma stays unpainted, benign green, malignant red,
# PDC/G blue, 50% opacity on non-stroma pixels.
PALETTE = {1: (0, 255, 0), 2: (255, 0, 0), 3: (0, 0, 255)}


class DataError(ValueError):
    pass


def _format_row(row: dict) -> list:
    out = []
    for key in CSV_HEADER:
        v = row[key]
        if isinstance(v, float):
            out.append(repr(v))
        else:
            out.append(str(v))
    return out


def rows_to_csv(rows: list) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for row in rows:
        writer.writerow(_format_row(row))
    return buf.getvalue()


def read_metrics_csv(path) -> list:
    rows = []
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != CSV_HEADER:
            raise DataError(f"{path}: line 1: unexpected header")
        for lineno, raw in enumerate(reader, start=2):
            try:
                row = {"epoch": int(raw["epoch"]), "phase": raw["phase"]}
                for key in CSV_HEADER[2:]:
                    row[key] = float(raw[key])
            except (TypeError, ValueError):
                raise DataError(f"{path}: line {lineno}: malformed row")
            rows.append(row)
    return rows


def cmd_gen_data(args) -> int:
    counts = {"train": args.train, "val": args.val, "test": args.test}
    if not 0.0 < args.annot_fraction <= 1.0:
        raise ConfigError("--annot-fraction must lie in (0, 1]")
    generate_dataset(args.out, args.seed, counts, args.size,
                     args.annot_fraction)
    print(f"wrote {sum(counts.values())} samples to {args.out}")
    return 0


def cmd_train(args) -> int:
    if args.config:
        with open(args.config) as f:
            config = parse_config(f.read())
    else:
        config = RunConfig().validate()

    train_set = load_split(args.data, "train")
    val_set = load_split(args.data, "val")
    if not train_set or not val_set:
        raise DataError(f"{args.data}: empty train or val split")
    os.makedirs(args.out, exist_ok=True)

    state = None
    prior_rows = []
    if args.resume:
        ckpt_config, state = load_checkpoint(args.resume)
        config = ckpt_config
        prior_path = os.path.join(args.out, "metrics.csv")
        if os.path.exists(prior_path):
            prior_rows = [r for r in read_metrics_csv(prior_path)
                          if r["epoch"] < state.epoch]

    rows = list(prior_rows)
    metrics_path = os.path.join(args.out, "metrics.csv")

    def hook(trainer_state, row, improved):
        rows.append(row)
        with open(metrics_path, "w") as f:
            f.write(rows_to_csv(rows))
        save_checkpoint(os.path.join(args.out, "last.ckpt"), config,
                        trainer_state)
        if improved:
            save_checkpoint(os.path.join(args.out, "best.ckpt"), config,
                            trainer_state)

    state, best, rows_out = run_training(
        config, train_set, val_set, state=state, epoch_hook=hook,
        stop_after_epoch=args.stop_after_epoch)

    with open(os.path.join(args.out, "curves.svg"), "w") as f:
        f.write(render_curves(rows))
    print(f"trained {len(rows_out)} epochs; best val mDice "
          f"{state.best_val_mdice:.4f}")
    return 0


def _predict_mask(params, image: np.ndarray) -> np.ndarray:
    logits = forward(params, Tensor(normalize(image)), None)
    return logits.data.argmax(axis=0).astype(np.uint8)


def cmd_eval(args) -> int:
    config, state = load_checkpoint(args.checkpoint)
    samples = load_split(args.data, args.split)
    if not samples:
        raise DataError(f"{args.data}/{args.split}: no samples")
    c = config.num_classes
    if int(samples[0].dense_mask.max()) >= c:
        raise DataError("class-count mismatch between checkpoint and data")
    tally = ConfusionTally(c)
    for sample in samples:
        accumulate(_predict_mask(state.student, sample.image),
                   sample.dense_mask, tally)
    iou = per_class_iou(tally)
    dice = per_class_dice(tally)
    lines = ["class,iou_pct,dice_pct"]
    for cls in range(c):
        lines.append(f"{cls},{iou[cls] * 100:.2f},{dice[cls] * 100:.2f}")
    lines.append(f"mean,{miou(tally) * 100:.2f},{mdice(tally) * 100:.2f}")
    text = "\n".join(lines) + "\n"
    with open(args.out, "w") as f:
        f.write(text)
    print(text, end="")
    return 0


def cmd_infer(args) -> int:
    config, state = load_checkpoint(args.checkpoint)
    image = read_ppm(args.image)
    pred = _predict_mask(state.student, image)
    write_pgm(f"{args.out}.mask.pgm", pred)

    img8 = np.clip(np.rint(image * 255.0), 0, 255)
    overlay = img8.copy()
    for cls, color in PALETTE.items():
        mask = pred == cls
        for ch in range(3):
            overlay[ch][mask] = np.floor(
                0.5 * img8[ch][mask] + 0.5 * color[ch] + 0.5)
    write_ppm(f"{args.out}.overlay.ppm", overlay / 255.0)
    return 0


def cmd_report(args) -> int:
    rows = read_metrics_csv(args.metrics)
    with open(args.out, "w") as f:
        f.write(render_curves(rows))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sgts",
        description="Sparse-label teacher-student segmentation trainer. "
        "Defaults are desk-scale (64x64 images, 60 epochs, batch 8, "
        "patience 15) rather than full-scale (512x512, 250 epochs, batch "
        "16, patience 50); override via the config file.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--train", type=int, default=200)
    p.add_argument("--val", type=int, default=40)
    p.add_argument("--test", type=int, default=40)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--annot-fraction", type=float, default=0.3)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="run the two-phase training protocol")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", help="continue from a last.ckpt")
    p.add_argument("--stop-after-epoch", type=int, default=None,
                   help="truncate the run after this epoch (testing)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint against dense "
                       "oracle masks")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="segment one PPM image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True, help="output path prefix")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("report", help="render training curves as SVG")
    p.add_argument("--metrics", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (DataError, RasterError, CheckpointError, FileNotFoundError,
            NotADirectoryError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericalAbort as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
