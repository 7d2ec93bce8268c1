"""Segmentation losses over selected pixels.

Dice and categorical cross-entropy make up the supervised term; the
consistency term is a mean squared error between student probabilities and
fused targets. Each loss is recorded on the tape as a single operation with
an analytic gradient with respect to the probability tensor; targets and
selections are constants. Unselected pixels never influence value or
gradient.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autograd import Tensor, add, scale

LOG_CLAMP = 1e-12


@dataclass
class PixelSelection:
    """H x W weights in {0, 1}; 1 marks a pixel that participates in a loss."""

    weights: np.ndarray

    @classmethod
    def from_mask(cls, mask: np.ndarray) -> "PixelSelection":
        return cls(np.asarray(mask, dtype=np.float64))

    @property
    def count(self) -> float:
        return float(self.weights.sum())


def one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    """[C,H,W] one-hot encoding; out-of-range labels (e.g. sentinel) map to
    the all-zero vector."""
    h, w = labels.shape
    out = np.zeros((num_classes, h, w), dtype=np.float64)
    for c in range(num_classes):
        out[c][labels == c] = 1.0
    return out


def dice_loss(tape, probs: Tensor, target_onehot: np.ndarray,
              sel: PixelSelection) -> Tensor:
    """Mean per-class soft Dice distance over selected pixels.

    Classes with zero denominator (absent in both target and prediction over
    the selection) are skipped; if every class is skipped the loss is 0.
    """
    w = sel.weights
    if w.sum() == 0:
        raise ValueError("dice_loss requires a non-empty selection")
    y = target_onehot * w
    p = probs.data * w
    inter = (y * p).sum(axis=(1, 2))
    denom = y.sum(axis=(1, 2)) + p.sum(axis=(1, 2))
    keep = denom > 0
    n_keep = int(keep.sum())
    if n_keep == 0:
        value = 0.0
    else:
        value = float(np.mean(1.0 - 2.0 * inter[keep] / denom[keep]))
    result = Tensor(value)

    if tape is not None and n_keep > 0:
        def backward(gout):
            g = np.zeros_like(probs.data)
            for c in np.flatnonzero(keep):
                d = denom[c]
                g[c] = w * (2.0 * inter[c] - 2.0 * target_onehot[c] * d) / (d * d)
            g *= float(gout) / n_keep
            if probs.grad is None:
                probs.grad = g
            else:
                probs.grad += g
        tape.record(result, backward)
    return result


def cce_loss(tape, probs: Tensor, target_onehot: np.ndarray,
             sel: PixelSelection) -> Tensor:
    """Mean categorical cross-entropy over selected pixels, log clamped."""
    w = sel.weights
    n_sel = w.sum()
    if n_sel == 0:
        raise ValueError("cce_loss requires a non-empty selection")
    clamped = np.maximum(probs.data, LOG_CLAMP)
    value = float(-(w * (target_onehot * np.log(clamped)).sum(axis=0)).sum()
                  / n_sel)
    result = Tensor(value)

    if tape is not None:
        def backward(gout):
            active = probs.data > LOG_CLAMP
            g = -(target_onehot * w) / clamped * active
            g *= float(gout) / n_sel
            if probs.grad is None:
                probs.grad = g
            else:
                probs.grad += g
        tape.record(result, backward)
    return result


def supervised_loss(tape, probs: Tensor, target_onehot: np.ndarray,
                    sel: PixelSelection) -> Tensor:
    """Unit-weight sum of Dice and cross-entropy."""
    return add(tape, dice_loss(tape, probs, target_onehot, sel),
               cce_loss(tape, probs, target_onehot, sel))


def consistency_loss(tape, student_probs: Tensor, fused) -> Tensor:
    """MSE between student probabilities and fused targets on selected pixels.

    Returns 0 for an empty selection (a strict early threshold may select
    nothing).
    """
    w = fused.selection.weights
    n_sel = w.sum()
    if n_sel == 0:
        return Tensor(0.0)
    c = student_probs.shape[0]
    diff = (student_probs.data - fused.targets) * w
    value = float((diff * diff).sum() / (n_sel * c))
    result = Tensor(value)

    if tape is not None:
        def backward(gout):
            g = diff * (2.0 * float(gout) / (n_sel * c))
            if student_probs.grad is None:
                student_probs.grad = g
            else:
                student_probs.grad += g
        tape.record(result, backward)
    return result


def total_loss(tape, sup: Tensor, cons: Tensor, alpha: float) -> Tensor:
    """alpha-weighted blend of supervised and consistency terms."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    return add(tape, scale(tape, sup, alpha), scale(tape, cons, 1.0 - alpha))
