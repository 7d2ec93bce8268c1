"""Teacher-student co-training engine.

Phase 1 trains the student on sparse labels only. At the warm-up boundary the
teacher is initialized from the student and thereafter updated only by EMA,
never by the optimizer. Phase 2 adds confidence-filtered pseudo-labels fused
with ground truth, blended into the total loss by the epoch schedule.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np

from . import autograd as ag
from .autograd import Tape, Tensor
from .backbone import ModelParams, forward
from .data import UNLABELED, Sample, apply_orientation, normalize, orient_array
from .losses import (PixelSelection, consistency_loss, one_hot,
                     supervised_loss, total_loss)
from .metrics import ConfusionTally, accumulate, mdice, miou
from .schedules import ScheduleConfig, ScheduleState, state_at

log = logging.getLogger(__name__)


class NumericalAbort(RuntimeError):
    """Non-finite loss or gradient; the run cannot continue."""


@dataclass
class FusedSupervision:
    targets: np.ndarray       # [C,H,W] one-hot on selected pixels
    selection: PixelSelection


@dataclass
class TrainView:
    """An augmented student view paired with the clean canonical image.

    The teacher predicts on the clean, noise-free image; its probabilities
    are mapped through the student view's spatial permutation so the two
    outputs align pixelwise. Disagreement between the views is what the
    consistency term trains against.
    """
    sample: Sample            # oriented + noised, image already normalized
    clean_image: np.ndarray   # normalized canonical-orientation image
    quarter_turns: int
    flip: bool


@dataclass
class OptimizerState:
    m: dict
    v: dict
    step: int = 0

    @classmethod
    def for_params(cls, params: ModelParams) -> "OptimizerState":
        return cls(m={n: np.zeros_like(t.data)
                      for n, t in params.tensors.items()},
                   v={n: np.zeros_like(t.data)
                      for n, t in params.tensors.items()})


@dataclass
class TrainerState:
    student: ModelParams
    teacher: ModelParams
    optimizer: OptimizerState
    epoch: int
    best_val_mdice: float
    epochs_since_improvement: int
    rng: np.random.Generator


def ema_update(teacher: ModelParams, student: ModelParams,
               beta: float) -> ModelParams:
    """In-place exponential moving average of teacher toward student."""
    if not 0.0 < beta < 1.0:
        raise ValueError("beta must lie in (0, 1)")
    for name, t in teacher.tensors.items():
        s = student.tensors[name]
        if t.data.shape != s.data.shape:
            raise ValueError(f"shape mismatch for {name}")
        t.data *= beta
        t.data += (1.0 - beta) * s.data
    return teacher


def confidence_mask(teacher_probs: np.ndarray, tau: float) -> np.ndarray:
    """True where the max class probability strictly exceeds tau."""
    return teacher_probs.max(axis=0) > tau


def fuse(sparse_gt: np.ndarray, teacher_probs: np.ndarray,
         conf: np.ndarray) -> FusedSupervision:
    """Ground truth wins wherever labeled; confident teacher argmax elsewhere.

    Pixels that are neither labeled nor confident are unselected with
    all-zero targets. Argmax ties break to the lowest class index.
    """
    c = teacher_probs.shape[0]
    labels = sparse_gt
    invalid = (labels >= c) & (labels != UNLABELED)
    if invalid.any():
        raise ValueError(f"label out of range at {int(invalid.sum())} pixels")
    targets = np.zeros_like(teacher_probs)
    gt = labels != UNLABELED
    pseudo = ~gt & conf
    argmax = teacher_probs.argmax(axis=0)
    for cls in range(c):
        targets[cls][(gt & (labels == cls)) | (pseudo & (argmax == cls))] = 1.0
    return FusedSupervision(
        targets=targets,
        selection=PixelSelection((gt | pseudo).astype(np.float64)))


def clip_global_norm(grads: dict, max_norm: float = 1.0) -> dict:
    """Scale all gradients so their joint L2 norm is at most max_norm."""
    total = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if total > max_norm:
        factor = max_norm / total
        for g in grads.values():
            g *= factor
    return grads


def adamw_step(params: ModelParams, grads: dict, state: OptimizerState,
               lr: float, weight_decay: float = 0.001, beta1: float = 0.9,
               beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One AdamW update with decoupled weight decay, in place."""
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise NumericalAbort(f"non-finite gradient in {name}")
    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for name, g in grads.items():
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        theta = params.tensors[name].data
        theta -= lr * ((m / bc1) / (np.sqrt(v / bc2) + eps)
                       + weight_decay * theta)


def _prepare(sample: Sample) -> Sample:
    return replace(sample, image=normalize(sample.image))


def train_step(state: TrainerState, batch: list, sched: ScheduleState,
               weight_decay: float = 0.001, clip_norm: float = 1.0,
               ema_beta: float = 0.999):
    """One optimization step over a batch of normalized samples.

    Returns (sup, cons, total, pseudo_coverage) or None when the batch has no
    labeled pixel and no fused selection (step skipped).
    """
    tape = Tape()
    state.student.zero_grads()
    c = state.student.num_classes
    sup_terms = []
    cons_terms = []
    coverage = []
    any_fused = False
    for item in batch:
        if isinstance(item, TrainView):
            sample = item.sample
            teacher_image = item.clean_image
            orientation = (item.quarter_turns, item.flip)
        else:
            sample = item
            teacher_image = item.image
            orientation = None
        logits = forward(state.student, Tensor(sample.image), tape)
        probs = ag.softmax_channels(tape, logits)
        labeled = sample.sparse_mask != UNLABELED
        if labeled.any():
            sel = PixelSelection(labeled.astype(np.float64))
            target = one_hot(sample.sparse_mask, c)
            sup_terms.append(supervised_loss(tape, probs, target, sel))
        if not sched.in_warmup:
            t_logits = forward(state.teacher, Tensor(teacher_image), None)
            t_probs = ag.softmax_channels(None, t_logits).data
            if orientation is not None:
                t_probs = orient_array(t_probs, orientation[0],
                                       orientation[1], (1, 2))
            conf = confidence_mask(t_probs, sched.tau)
            fused = fuse(sample.sparse_mask, t_probs, conf)
            any_fused = any_fused or fused.selection.count > 0
            cons_terms.append(consistency_loss(tape, probs, fused))
            sentinel = ~labeled
            n_sent = int(sentinel.sum())
            n_pseudo = int((fused.selection.weights.astype(bool)
                            & sentinel).sum())
            coverage.append(n_pseudo / n_sent if n_sent else 0.0)

    if not sup_terms and not any_fused:
        log.warning("skipping step: no labeled pixels and empty fusion "
                    "selection")
        return None

    def mean_of(terms):
        if not terms:
            return Tensor(0.0)
        acc = terms[0]
        for t in terms[1:]:
            acc = ag.add(tape, acc, t)
        return ag.scale(tape, acc, 1.0 / len(terms))

    sup = mean_of(sup_terms)
    cons = mean_of(cons_terms)
    total = total_loss(tape, sup, cons, sched.alpha)
    if not np.isfinite(total.data):
        raise NumericalAbort(f"non-finite loss at epoch {sched.epoch}")
    tape.backward(total)

    grads = {}
    for name, p in state.student.tensors.items():
        grads[name] = (p.grad if p.grad is not None
                       else np.zeros_like(p.data))
        if not np.isfinite(grads[name]).all():
            raise NumericalAbort(f"non-finite gradient in {name} at epoch "
                                 f"{sched.epoch}")
    clip_global_norm(grads, clip_norm)
    adamw_step(state.student, grads, state.optimizer, sched.lr,
               weight_decay=weight_decay)
    if not sched.in_warmup:
        ema_update(state.teacher, state.student, ema_beta)
    mean_cov = float(np.mean(coverage)) if coverage else 0.0
    return sup.item(), cons.item(), total.item(), mean_cov



def validate(params: ModelParams, samples: list, num_classes: int):
    """mIoU/mDice of argmax predictions against dense oracle masks."""
    tally = ConfusionTally(num_classes)
    for sample in samples:
        logits = forward(params, Tensor(normalize(sample.image)), None)
        pred = logits.data.argmax(axis=0).astype(np.uint8)
        accumulate(pred, sample.dense_mask, tally)
    return miou(tally), mdice(tally)


def run_training(config, train_set: list, val_set: list,
                 state: TrainerState | None = None, epoch_hook=None,
                 stop_after_epoch: int | None = None):
    """Full two-phase training loop with early stopping.

    `config` is a RunConfig (see sgts.config). A partially trained state may
    be passed in to resume; `epoch_hook(state, row, improved)` fires after
    every epoch, and `stop_after_epoch` truncates the run (for resume tests).
    Returns (state, best_student, rows).
    """
    from .backbone import init_params

    sched_cfg = ScheduleConfig(
        total_epochs=config.epochs, warmup_fraction=config.warmup_fraction,
        alpha_start=config.alpha_start, alpha_end=config.alpha_end,
        tau_start=config.tau_start, tau_end=config.tau_end,
        lr_start=config.lr_start, lr_end=config.lr_end,
        ema_beta=config.ema_beta)

    if state is None:
        student = init_params(config.seed, config.num_classes)
        state = TrainerState(
            student=student, teacher=student.copy(),
            optimizer=OptimizerState.for_params(student), epoch=0,
            best_val_mdice=-np.inf, epochs_since_improvement=0,
            rng=np.random.default_rng(config.seed))

    prepared_val = val_set
    best_student = state.student.copy()
    rows = []
    n = len(train_set)
    clean_images = [normalize(s.image) for s in train_set]
    while state.epoch < config.epochs:
        epoch = state.epoch
        sched = state_at(sched_cfg, epoch)
        if config.co_training and epoch == sched_cfg.warmup_epochs:
            state.teacher = state.student.copy()
        if not config.co_training:
            sched = ScheduleState(epoch=epoch, alpha=1.0, tau=np.inf,
                                  lr=sched.lr, in_warmup=True)

        order = state.rng.permutation(n)
        sums = np.zeros(3)
        covs = []
        steps = 0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            batch = []
            for i in idx:
                k = int(state.rng.integers(4))
                flip = bool(state.rng.random() < 0.5)
                view = apply_orientation(train_set[i], k, flip)
                noisy = np.clip(view.image + state.rng.normal(
                    0.0, 0.01, size=view.image.shape), 0.0, 1.0)
                view = replace(view, image=normalize(noisy))
                batch.append(TrainView(view, clean_images[i], k, flip))
            out = train_step(state, batch, sched,
                             weight_decay=config.weight_decay,
                             clip_norm=config.clip_norm,
                             ema_beta=config.ema_beta)
            if out is None:
                continue
            sup, cons, total, cov = out
            sums += (sup, cons, total)
            covs.append(cov)
            steps += 1

        val_miou, val_mdice = validate(state.student, prepared_val,
                                       config.num_classes)
        row = {
            "epoch": epoch,
            "phase": "warmup" if sched.in_warmup else "cotrain",
            "alpha": sched.alpha,
            "tau": sched.tau,
            "lr": sched.lr,
            "loss_sup": float(sums[0]) / max(steps, 1),
            "loss_cons": float(sums[1]) / max(steps, 1),
            "loss_total": float(sums[2]) / max(steps, 1),
            "val_miou": float(val_miou),
            "val_mdice": float(val_mdice),
            "pseudo_coverage": float(np.mean(covs)) if covs else 0.0,
        }
        rows.append(row)

        improved = val_mdice > state.best_val_mdice
        if improved:
            state.best_val_mdice = val_mdice
            state.epochs_since_improvement = 0
            best_student = state.student.copy()
        else:
            state.epochs_since_improvement += 1
        state.epoch = epoch + 1

        if epoch_hook is not None:
            epoch_hook(state, row, improved)
        if state.epochs_since_improvement >= config.patience:
            log.info("early stop at epoch %d", epoch)
            break
        if stop_after_epoch is not None and epoch >= stop_after_epoch:
            break
    return state, best_student, rows
