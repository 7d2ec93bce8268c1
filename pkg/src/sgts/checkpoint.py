"""Binary checkpoint format.

Layout (all integers little-endian):
    magic "SGTS" | version u32 | config-text u32 length + utf-8 bytes |
    meta-json u32 length + utf-8 bytes | tensor count u32 | entries.
Each tensor entry: name u32 length + utf-8 bytes | rank u32 | extents u32* |
float64 little-endian payload. Student, teacher, and optimizer moments share
the table under "student/", "teacher/", "opt.m/", "opt.v/" prefixes.

The meta block carries epoch, best validation mDice, the early-stopping
counter, the optimizer step, and the exact RNG stream state, so a loaded
checkpoint resumes training bitwise.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .autograd import Tensor
from .backbone import ModelParams, layer_shapes
from .config import RunConfig, parse_config, serialize_config
from .trainer import OptimizerState, TrainerState

MAGIC = b"SGTS"
VERSION = 1


class CheckpointError(ValueError):
    """Malformed or incompatible checkpoint."""


def _pack_block(payload: bytes) -> bytes:
    return struct.pack("<I", len(payload)) + payload


def _pack_tensor(name: str, array: np.ndarray) -> bytes:
    nb = name.encode()
    head = struct.pack("<I", len(nb)) + nb
    head += struct.pack("<I", array.ndim)
    head += struct.pack(f"<{array.ndim}I", *array.shape)
    return head + np.ascontiguousarray(array, dtype="<f8").tobytes()


def save_checkpoint(path, config: RunConfig, state: TrainerState) -> None:
    tensors = {}
    for prefix, params in (("student", state.student),
                           ("teacher", state.teacher)):
        for name, t in params.tensors.items():
            tensors[f"{prefix}/{name}"] = t.data
    for prefix, table in (("opt.m", state.optimizer.m),
                          ("opt.v", state.optimizer.v)):
        for name, arr in table.items():
            tensors[f"{prefix}/{name}"] = arr

    meta = {
        "epoch": state.epoch,
        "best_val_mdice": state.best_val_mdice,
        "epochs_since_improvement": state.epochs_since_improvement,
        "opt_step": state.optimizer.step,
        "rng_state": state.rng.bit_generator.state,
    }
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(_pack_block(serialize_config(config).encode()))
        f.write(_pack_block(json.dumps(meta, sort_keys=True).encode()))
        f.write(struct.pack("<I", len(tensors)))
        for name in sorted(tensors):
            f.write(_pack_tensor(name, tensors[name]))


class _Reader:
    def __init__(self, buf: bytes, path):
        self.buf = buf
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"{self.path}: truncated at byte "
                                  f"{self.pos}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def load_checkpoint(path):
    """Returns (config, TrainerState)."""
    with open(path, "rb") as f:
        r = _Reader(f.read(), path)
    if r.take(4) != MAGIC:
        raise CheckpointError(f"{path}: bad magic")
    version = r.u32()
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    config = parse_config(r.take(r.u32()).decode())
    meta = json.loads(r.take(r.u32()).decode())
    tensors = {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode()
        rank = r.u32()
        shape = struct.unpack(f"<{rank}I", r.take(4 * rank))
        count = int(np.prod(shape)) if rank else 1
        data = np.frombuffer(r.take(8 * count), dtype="<f8").reshape(shape)
        tensors[name] = data.astype(np.float64)

    num_classes = config.num_classes
    order = list(layer_shapes(num_classes).keys())

    # Rebuild tables in canonical layer order: floating-point reductions over
    # parameters (e.g. the clip norm) must see the same order as a fresh run.
    def collect(prefix):
        out = {}
        for name in order:
            key = f"{prefix}/{name}"
            if key not in tensors:
                raise CheckpointError(f"{path}: missing tensor {key}")
            out[name] = tensors[key]
        return out

    student = ModelParams({n: Tensor(a) for n, a in collect("student").items()})
    teacher = ModelParams({n: Tensor(a) for n, a in collect("teacher").items()})
    opt = OptimizerState(m={n: a.copy() for n, a in collect("opt.m").items()},
                         v={n: a.copy() for n, a in collect("opt.v").items()},
                         step=meta["opt_step"])
    rng = np.random.default_rng()
    rng.bit_generator.state = meta["rng_state"]
    state = TrainerState(
        student=student, teacher=teacher, optimizer=opt,
        epoch=meta["epoch"], best_val_mdice=meta["best_val_mdice"],
        epochs_since_improvement=meta["epochs_since_improvement"], rng=rng)
    return config, state
