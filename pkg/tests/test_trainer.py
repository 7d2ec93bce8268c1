import numpy as np
import pytest

from sgts.autograd import Tensor
from sgts.backbone import init_params
from sgts.config import RunConfig
from sgts.data import UNLABELED, generate_sample, normalize, sparsify
from sgts.schedules import ScheduleState
from sgts.trainer import (FusedSupervision, NumericalAbort, OptimizerState,
                          TrainerState, adamw_step, clip_global_norm,
                          confidence_mask, ema_update, fuse, run_training,
                          train_step, validate)


def small_sets(n_train=8, n_val=4, size=32):
    train = [sparsify(generate_sample(i, size), 0.5, i + 1000)
             for i in range(n_train)]
    val = [sparsify(generate_sample(i + 5000, size), 0.5, i + 6000)
           for i in range(n_val)]
    return train, val


def small_config(**kw):
    defaults = dict(epochs=4, batch_size=4, patience=10, image_size=32,
                    train_size=8, val_size=4, test_size=4)
    defaults.update(kw)
    return RunConfig(**defaults)


def fresh_state(seed=0):
    student = init_params(seed, 4)
    return TrainerState(student=student, teacher=student.copy(),
                        optimizer=OptimizerState.for_params(student),
                        epoch=0, best_val_mdice=-np.inf,
                        epochs_since_improvement=0,
                        rng=np.random.default_rng(seed))


# --- EMA ---------------------------------------------------------------

def test_ema_single_update():
    teacher = init_params(0, 4)
    student = init_params(1, 4)
    for t in teacher.tensors.values():
        t.data[:] = 1.0
    for s in student.tensors.values():
        s.data[:] = 0.0
    ema_update(teacher, student, 0.999)
    for t in teacher.tensors.values():
        assert np.allclose(t.data, 0.999)


def test_ema_fixed_point():
    teacher = init_params(2, 4)
    student = teacher.copy()
    before = {n: t.data.copy() for n, t in teacher.tensors.items()}
    ema_update(teacher, student, 0.999)
    for n, t in teacher.tensors.items():
        assert np.allclose(t.data, before[n])


def test_ema_closed_form_100_steps():
    teacher = init_params(3, 4)
    student = init_params(4, 4)
    theta0 = {n: t.data.copy() for n, t in teacher.tensors.items()}
    for _ in range(100):
        ema_update(teacher, student, 0.999)
    beta_k = 0.999 ** 100
    for n, t in teacher.tensors.items():
        expected = student.tensors[n].data + \
            (theta0[n] - student.tensors[n].data) * beta_k
        assert np.abs(t.data - expected).max() < 1e-9


def test_ema_rejects_bad_beta():
    teacher = init_params(0, 4)
    with pytest.raises(ValueError):
        ema_update(teacher, teacher.copy(), 1.0)


# --- confidence filtering and fusion -----------------------------------

def test_confidence_threshold_cases():
    probs = np.array([0.97, 0.01, 0.01, 0.01]).reshape(4, 1, 1)
    assert confidence_mask(probs, 0.95)[0, 0]
    probs = np.array([0.94, 0.02, 0.02, 0.02]).reshape(4, 1, 1)
    assert not confidence_mask(probs, 0.95)[0, 0]
    uniform = np.full((4, 1, 1), 0.25)
    assert not confidence_mask(uniform, 0.25)[0, 0]  # strict inequality
    assert not confidence_mask(probs, np.inf).any()


def test_confidence_monotone_in_tau():
    rng = np.random.default_rng(0)
    logits = rng.normal(scale=3, size=(4, 16, 16))
    probs = np.exp(logits) / np.exp(logits).sum(axis=0)
    counts = [confidence_mask(probs, tau).sum()
              for tau in np.arange(0.25, 0.96, 0.05)]
    assert all(a >= b for a, b in zip(counts, counts[1:]))


def test_fuse_gt_wins():
    gt = np.full((1, 1), 2, dtype=np.uint8)
    probs = np.array([0.0, 0.99, 0.005, 0.005]).reshape(4, 1, 1)
    fused = fuse(gt, probs, confidence_mask(probs, 0.25))
    assert fused.targets[2, 0, 0] == 1.0
    assert fused.targets[1, 0, 0] == 0.0
    assert fused.selection.weights[0, 0] == 1.0


def test_fuse_pseudo_argmax_and_unselected():
    gt = np.full((1, 1), UNLABELED, dtype=np.uint8)
    probs = np.array([0.1, 0.1, 0.1, 0.7]).reshape(4, 1, 1)
    fused = fuse(gt, probs, confidence_mask(probs, 0.25))
    assert fused.targets[3, 0, 0] == 1.0
    assert fused.selection.weights[0, 0] == 1.0

    uniform = np.full((4, 1, 1), 0.25)
    fused = fuse(gt, uniform, confidence_mask(uniform, 0.95))
    assert fused.selection.weights[0, 0] == 0.0
    assert np.all(fused.targets == 0.0)


def test_fuse_tie_breaks_lowest_class():
    gt = np.full((1, 1), UNLABELED, dtype=np.uint8)
    probs = np.array([0.4, 0.4, 0.1, 0.1]).reshape(4, 1, 1)
    fused = fuse(gt, probs, np.ones((1, 1), dtype=bool))
    assert fused.targets[0, 0, 0] == 1.0


def test_fuse_rejects_out_of_range_label():
    gt = np.full((1, 1), 7, dtype=np.uint8)
    probs = np.full((4, 1, 1), 0.25)
    with pytest.raises(ValueError):
        fuse(gt, probs, np.ones((1, 1), dtype=bool))


# --- optimizer ---------------------------------------------------------

def test_adamw_pure_decay():
    params = init_params(0, 4)
    for t in params.tensors.values():
        t.data[:] = 1.0
    grads = {n: np.zeros_like(t.data) for n, t in params.tensors.items()}
    state = OptimizerState.for_params(params)
    adamw_step(params, grads, state, lr=0.01, weight_decay=0.001)
    for t in params.tensors.values():
        assert np.allclose(t.data, 0.99999, atol=1e-15)


def test_adamw_first_step_bias_correction():
    params = init_params(0, 4)
    for t in params.tensors.values():
        t.data[:] = 0.0
    grads = {n: np.ones_like(t.data) for n, t in params.tensors.items()}
    state = OptimizerState.for_params(params)
    adamw_step(params, grads, state, lr=0.01, weight_decay=0.0)
    for t in params.tensors.values():
        assert np.allclose(t.data, -0.01 / (1 + 1e-8), atol=1e-12)


def test_adamw_monotone_against_gradient():
    params = init_params(0, 4)
    for t in params.tensors.values():
        t.data[:] = 0.0
    state = OptimizerState.for_params(params)
    history = []
    for _ in range(2):
        grads = {n: np.ones_like(t.data) for n, t in params.tensors.items()}
        adamw_step(params, grads, state, lr=0.01, weight_decay=0.0)
        history.append(params.tensors["enc1.kernel"].data[0, 0, 0, 0])
    assert history[0] < 0
    assert history[1] < history[0]


def test_adamw_aborts_on_nonfinite_gradient():
    params = init_params(0, 4)
    grads = {n: np.full_like(t.data, np.nan)
             for n, t in params.tensors.items()}
    with pytest.raises(NumericalAbort):
        adamw_step(params, grads, OptimizerState.for_params(params), lr=0.01)


def test_clip_global_norm():
    grads = {"a": np.array([1.2, 1.6])}  # norm 2.0
    clip_global_norm(grads, 1.0)
    assert np.allclose(grads["a"], [0.6, 0.8])
    assert abs(np.sqrt((grads["a"] ** 2).sum()) - 1.0) < 1e-12

    small = {"a": np.array([0.3, 0.4])}
    original = small["a"].copy()
    clip_global_norm(small, 1.0)
    assert np.array_equal(small["a"], original)


def test_clip_norm_exactly_min():
    rng = np.random.default_rng(1)
    for _ in range(10):
        grads = {"a": rng.normal(size=(5,)), "b": rng.normal(size=(3, 3))}
        n = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
        clip_global_norm(grads, 1.0)
        post = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
        assert post <= min(n, 1.0) + 1e-12


# --- train_step and run_training ---------------------------------------

def prepared_batch(size=32, n=2):
    from dataclasses import replace
    out = []
    for i in range(n):
        s = sparsify(generate_sample(i + 30, size), 0.5, i + 40)
        out.append(replace(s, image=normalize(s.image)))
    return out


def test_warmup_step_keeps_teacher_and_uses_sup_only():
    state = fresh_state()
    teacher_before = {n: t.data.copy()
                      for n, t in state.teacher.tensors.items()}
    sched = ScheduleState(epoch=0, alpha=1.0, tau=np.inf, lr=0.01,
                          in_warmup=True)
    sup, cons, total, cov = train_step(state, prepared_batch(), sched)
    assert total == sup
    assert cons == 0.0
    assert cov == 0.0
    for n, t in state.teacher.tensors.items():
        assert np.array_equal(t.data, teacher_before[n])


def test_cotrain_step_blends_losses():
    state = fresh_state()
    sched = ScheduleState(epoch=2, alpha=0.9, tau=0.5, lr=0.001,
                          in_warmup=False)
    sup, cons, total, cov = train_step(state, prepared_batch(), sched)
    assert abs(total - (0.9 * sup + 0.1 * cons)) < 1e-12


def test_step_skipped_without_supervision():
    from dataclasses import replace
    state = fresh_state()
    sample = generate_sample(50, 32)
    blank = replace(sample, image=normalize(sample.image),
                    sparse_mask=np.full((32, 32), UNLABELED, dtype=np.uint8))
    sched = ScheduleState(epoch=0, alpha=1.0, tau=np.inf, lr=0.01,
                          in_warmup=True)
    assert train_step(state, [blank], sched) is None


def test_train_step_deterministic():
    results = []
    for _ in range(2):
        state = fresh_state(7)
        sched = ScheduleState(epoch=2, alpha=0.9, tau=0.8, lr=0.005,
                              in_warmup=False)
        results.append(train_step(state, prepared_batch(), sched))
    assert results[0] == results[1]


def test_run_training_phases_and_determinism():
    train, val = small_sets()
    cfg = small_config(epochs=8)
    _, _, rows_a = run_training(cfg, train, val)
    _, _, rows_b = run_training(cfg, train, val)
    assert rows_a == rows_b
    assert [r["phase"] for r in rows_a[:2]] == ["warmup", "warmup"]
    assert all(r["phase"] == "cotrain" for r in rows_a[2:])
    assert rows_a[0]["alpha"] == 1.0
    assert rows_a[2]["alpha"] == pytest.approx(0.9, abs=1e-12)


def test_early_stopping_counts_nonimproving_epochs():
    train, val = small_sets(4, 2)
    cfg = small_config(epochs=20, patience=3, train_size=4, val_size=2)

    calls = []

    def hook(state, row, improved):
        calls.append((row["epoch"], state.epochs_since_improvement))
        # freeze validation by making every later epoch "not improved"
        state.best_val_mdice = np.inf

    state, _, rows = run_training(cfg, train, val, epoch_hook=hook)
    # first epoch always improves over -inf; then exactly 3 frozen epochs
    assert len(rows) == 4
    assert state.epochs_since_improvement == 3


def test_teacher_initialized_from_student_at_warmup_end():
    train, val = small_sets(4, 2)
    cfg = small_config(epochs=4, train_size=4, val_size=2)
    seen = {}

    def hook(state, row, improved):
        if row["epoch"] == 1:
            seen["student_end_warmup"] = {
                n: t.data.copy() for n, t in state.student.tensors.items()}

    run_training(cfg, train, val, epoch_hook=hook)
    assert "student_end_warmup" in seen


def test_validate_perfect_on_own_predictions():
    from dataclasses import replace
    params = init_params(1, 4)
    samples = [generate_sample(i, 32) for i in range(3)]
    from sgts.backbone import forward
    relabeled = []
    for s in samples:
        pred = forward(params, Tensor(normalize(s.image))).data.argmax(0)
        relabeled.append(replace(s, dense_mask=pred.astype(np.uint8)))
    mi, md = validate(params, relabeled, 4)
    assert mi == 1.0 and md == 1.0
