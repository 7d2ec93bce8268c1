"""Minimal float64 tensor engine with reverse-mode gradients.

Everything runs on contiguous numpy float64 arrays. Operations optionally
record themselves on a Tape; replaying the tape in reverse accumulates exact
gradients into every tensor that participated. There is no broadcasting, no
GPU path, and no in-place mutation of taped tensors.
"""

from __future__ import annotations

import math

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class Tensor:
    """Dense row-major float64 array plus an optional gradient buffer."""

    __slots__ = ("data", "grad")

    def __init__(self, data):
        self.data = np.asarray(data, dtype=np.float64, order="C")
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @classmethod
    def zeros(cls, shape):
        return cls(np.zeros(shape, dtype=np.float64))

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape})"


def _accumulate(tensor: Tensor, grad: np.ndarray) -> None:
    if tensor.grad is None:
        tensor.grad = np.array(grad, dtype=np.float64)
    else:
        tensor.grad += grad


class Tape:
    """Ordered record of executed operations.

    Each record holds the output tensor and a closure that, given the output
    gradient, accumulates gradients into the operation's inputs. Backward
    replays records in reverse; a tensor feeding multiple consumers receives
    the sum of all contributions.
    """

    def __init__(self):
        self._records = []

    def record(self, output: Tensor, backward) -> None:
        self._records.append((output, backward))

    def backward(self, loss: Tensor) -> None:
        if loss.data.shape != ():
            raise ShapeError("backward requires a scalar loss")
        loss.grad = np.ones((), dtype=np.float64)
        for output, backward in reversed(self._records):
            if output.grad is not None:
                backward(output.grad)


def conv2d(tape, x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1,
           pad: int = 0) -> Tensor:
    """2-D cross-correlation with zero padding over a [Cin,H,W] input."""
    cin, h, w = x.shape
    cout, kcin, kh, kw = kernel.shape
    if kcin != cin:
        raise ShapeError(f"kernel expects {kcin} input channels, got {cin}")
    if bias.shape != (cout,):
        raise ShapeError(f"bias shape {bias.shape} != ({cout},)")
    if h + 2 * pad < kh or w + 2 * pad < kw:
        raise ShapeError("padded input smaller than kernel")

    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad))) if pad else x.data
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    out = np.empty((cout, ho, wo), dtype=np.float64)
    out[:] = bias.data[:, None, None]
    for u in range(kh):
        for v in range(kw):
            view = xp[:, u:u + stride * (ho - 1) + 1:stride,
                      v:v + stride * (wo - 1) + 1:stride]
            out += np.tensordot(kernel.data[:, :, u, v], view, axes=(1, 0))
    result = Tensor(out)

    if tape is not None:
        def backward(gout):
            gxp = np.zeros_like(xp)
            gk = np.empty_like(kernel.data)
            for u in range(kh):
                for v in range(kw):
                    rows = slice(u, u + stride * (ho - 1) + 1, stride)
                    cols = slice(v, v + stride * (wo - 1) + 1, stride)
                    view = xp[:, rows, cols]
                    gk[:, :, u, v] = np.tensordot(gout, view,
                                                  axes=([1, 2], [1, 2]))
                    gxp[:, rows, cols] += np.tensordot(
                        kernel.data[:, :, u, v], gout, axes=(0, 0))
            gx = gxp[:, pad:pad + h, pad:pad + w] if pad else gxp
            _accumulate(x, gx)
            _accumulate(kernel, gk)
            _accumulate(bias, gout.sum(axis=(1, 2)))
        tape.record(result, backward)
    return result


def relu(tape, x: Tensor) -> Tensor:
    """Elementwise max(0, x); subgradient at 0 is 0."""
    result = Tensor(np.maximum(x.data, 0.0))
    if tape is not None:
        positive = x.data > 0.0

        def backward(gout):
            _accumulate(x, gout * positive)
        tape.record(result, backward)
    return result


def nearest_upsample2x(tape, x: Tensor) -> Tensor:
    """Replicate each pixel of a [C,H,W] tensor into a 2x2 block."""
    out = np.repeat(np.repeat(x.data, 2, axis=1), 2, axis=2)
    result = Tensor(out)
    if tape is not None:
        c, h, w = x.shape

        def backward(gout):
            g = gout.reshape(c, h, 2, w, 2).sum(axis=(2, 4))
            _accumulate(x, g)
        tape.record(result, backward)
    return result


def concat_channels(tape, a: Tensor, b: Tensor) -> Tensor:
    """Stack two [*,H,W] tensors along the channel axis, a first."""
    if a.shape[1:] != b.shape[1:]:
        raise ShapeError(f"spatial mismatch {a.shape[1:]} vs {b.shape[1:]}")
    result = Tensor(np.concatenate([a.data, b.data], axis=0))
    if tape is not None:
        ca = a.shape[0]

        def backward(gout):
            _accumulate(a, gout[:ca])
            _accumulate(b, gout[ca:])
        tape.record(result, backward)
    return result


def softmax_channels(tape, z: Tensor) -> Tensor:
    """Per-pixel softmax over the channel axis, max-subtracted for stability."""
    shifted = z.data - z.data.max(axis=0, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=0, keepdims=True)
    result = Tensor(p)
    if tape is not None:
        def backward(gout):
            inner = (p * gout).sum(axis=0, keepdims=True)
            _accumulate(z, p * (gout - inner))
        tape.record(result, backward)
    return result


def scale(tape, x: Tensor, factor: float) -> Tensor:
    """Multiply by a constant scalar."""
    result = Tensor(x.data * factor)
    if tape is not None:
        def backward(gout):
            _accumulate(x, gout * factor)
        tape.record(result, backward)
    return result


def add(tape, a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum of two same-shape tensors."""
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")
    result = Tensor(a.data + b.data)
    if tape is not None:
        def backward(gout):
            _accumulate(a, gout)
            _accumulate(b, gout)
        tape.record(result, backward)
    return result


def finite_diff_check(loss_fn, params, h: float = 1e-5) -> float:
    """Compare reverse-mode gradients against central finite differences.

    loss_fn(params, tape) must return a scalar Tensor and be deterministic.
    Returns the maximum relative error over every parameter coordinate, or
    inf when the loss or a probe evaluation is non-finite.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    for p in params:
        p.grad = None
    tape = Tape()
    loss = loss_fn(params, tape)
    if not np.isfinite(loss.data):
        return math.inf
    tape.backward(loss)

    max_err = 0.0
    for p in params:
        grad = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        gflat = grad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = float(loss_fn(params, None).data)
            flat[i] = orig - h
            f_minus = float(loss_fn(params, None).data)
            flat[i] = orig
            if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
                return math.inf
            g_fd = (f_plus - f_minus) / (2.0 * h)
            g_ad = gflat[i]
            err = abs(g_ad - g_fd) / max(1e-8, abs(g_ad) + abs(g_fd))
            max_err = max(max_err, err)
    return max_err
