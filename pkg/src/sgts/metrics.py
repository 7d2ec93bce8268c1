"""Pixel-level evaluation: per-class IoU/Dice from confusion counts.

Counts accumulate per class across the whole dataset (micro), then the
reported mIoU/mDice are macro means over classes that appeared at all.
Sentinel reference pixels are ignored, so sparse masks can be evaluated
directly; predictions must be dense.
"""

from __future__ import annotations

import numpy as np

from .data import UNLABELED


class ConfusionTally:
    """Per-class TP/FP/FN accumulators."""

    def __init__(self, num_classes: int):
        self.num_classes = num_classes
        self.tp = np.zeros(num_classes, dtype=np.int64)
        self.fp = np.zeros(num_classes, dtype=np.int64)
        self.fn = np.zeros(num_classes, dtype=np.int64)

    def merge(self, other: "ConfusionTally") -> "ConfusionTally":
        self.tp += other.tp
        self.fp += other.fp
        self.fn += other.fn
        return self


def accumulate(pred: np.ndarray, ref: np.ndarray,
               tally: ConfusionTally) -> ConfusionTally:
    """Add one mask pair into the tally; sentinel reference pixels skipped."""
    if pred.shape != ref.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {ref.shape}")
    valid = ref != UNLABELED
    p = pred[valid].astype(np.int64)
    r = ref[valid].astype(np.int64)
    c = tally.num_classes
    hit = p == r
    tally.tp += np.bincount(p[hit], minlength=c)
    tally.fp += np.bincount(p[~hit], minlength=c)
    tally.fn += np.bincount(r[~hit], minlength=c)
    return tally


def per_class_iou(tally: ConfusionTally) -> np.ndarray:
    """IoU per class; nan where the class never appeared."""
    support = tally.tp + tally.fp + tally.fn
    out = np.full(tally.num_classes, np.nan)
    present = support > 0
    out[present] = tally.tp[present] / support[present]
    return out


def per_class_dice(tally: ConfusionTally) -> np.ndarray:
    support = 2 * tally.tp + tally.fp + tally.fn
    out = np.full(tally.num_classes, np.nan)
    present = support > 0
    out[present] = 2 * tally.tp[present] / support[present]
    return out


def _macro_mean(values: np.ndarray) -> float:
    present = ~np.isnan(values)
    if not present.any():
        raise ValueError("tally is empty: no class has any support")
    return float(values[present].mean())


def miou(tally: ConfusionTally) -> float:
    return _macro_mean(per_class_iou(tally))


def mdice(tally: ConfusionTally) -> float:
    return _macro_mean(per_class_dice(tally))
