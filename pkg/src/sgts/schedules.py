"""Epoch-indexed curricula: loss weighting, confidence threshold, learning rate.

Warm-up spans the first round(T * warmup_fraction) epochs, during which the
supervised weight is pinned at 1.0 and the confidence threshold at +inf (no
pseudo-labels). After warm-up, the weight and threshold follow a cosine decay
over the remaining epochs; the learning rate anneals over the full horizon.
"""

from __future__ import annotations

import math
from dataclasses import dataclass


@dataclass
class ScheduleConfig:
    total_epochs: int
    warmup_fraction: float = 0.25
    alpha_start: float = 0.9
    alpha_end: float = 0.01
    tau_start: float = 0.95
    tau_end: float = 0.25
    lr_start: float = 0.01
    lr_end: float = 0.00001
    ema_beta: float = 0.999

    def __post_init__(self):
        if self.total_epochs < 1:
            raise ValueError("total_epochs must be positive")
        if not 0.0 < self.warmup_fraction < 1.0:
            raise ValueError("warmup_fraction must lie in (0, 1)")
        if not (self.alpha_start > self.alpha_end
                and self.tau_start > self.tau_end
                and self.lr_start > self.lr_end):
            raise ValueError("schedule starts must exceed their ends")
        if not 0.0 < self.ema_beta < 1.0:
            raise ValueError("ema_beta must lie in (0, 1)")
        if not 1 <= self.warmup_epochs < self.total_epochs:
            raise ValueError("warm-up must cover at least one epoch and "
                             "leave at least one co-training epoch")
        if self.total_epochs - self.warmup_epochs - 1 < 1:
            raise ValueError("need at least two co-training epochs")

    @property
    def warmup_epochs(self) -> int:
        return round(self.total_epochs * self.warmup_fraction)


@dataclass
class ScheduleState:
    epoch: int
    alpha: float
    tau: float
    lr: float
    in_warmup: bool


def cosine_decay(t: int, total: int, v_start: float, v_end: float) -> float:
    """Half-cosine interpolation from v_start (t=0) down to v_end (t=total)."""
    if total < 1:
        raise ValueError("total must be >= 1")
    if not 0 <= t <= total:
        raise ValueError(f"t={t} outside [0, {total}]")
    return v_end + 0.5 * (v_start - v_end) * (1.0 + math.cos(math.pi * t / total))


def state_at(config: ScheduleConfig, epoch: int) -> ScheduleState:
    """Schedule values in effect for a given epoch."""
    t_total = config.total_epochs
    if not 0 <= epoch < t_total:
        raise ValueError(f"epoch {epoch} outside [0, {t_total})")
    lr = cosine_decay(epoch, t_total - 1, config.lr_start, config.lr_end)
    warmup = config.warmup_epochs
    if epoch < warmup:
        return ScheduleState(epoch=epoch, alpha=1.0, tau=math.inf, lr=lr,
                             in_warmup=True)
    t_rel = epoch - warmup
    horizon = t_total - warmup - 1
    alpha = cosine_decay(t_rel, horizon, config.alpha_start, config.alpha_end)
    tau = cosine_decay(t_rel, horizon, config.tau_start, config.tau_end)
    return ScheduleState(epoch=epoch, alpha=alpha, tau=tau, lr=lr,
                        in_warmup=False)
