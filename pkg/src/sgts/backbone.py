"""Fixed minimal encoder-decoder segmentation network.

Five convolutions with one skip connection: two encoder stages, a strided
downsample, a nearest-neighbor upsample path, and a 1x1 classification head.
Spatial output size equals input size for even H and W.
"""

from __future__ import annotations

import numpy as np

from .autograd import (ShapeError, Tensor, concat_channels, conv2d,
                       nearest_upsample2x, relu)


def layer_shapes(num_classes: int) -> dict:
    """Parameter names and shapes in their canonical (init/serialize) order."""
    return {
        "enc1.kernel": (8, 3, 3, 3), "enc1.bias": (8,),
        "down.kernel": (16, 8, 3, 3), "down.bias": (16,),
        "enc2.kernel": (16, 16, 3, 3), "enc2.bias": (16,),
        "up.kernel": (8, 16, 3, 3), "up.bias": (8,),
        "head.kernel": (num_classes, 16, 1, 1), "head.bias": (num_classes,),
    }


class ModelParams:
    """Named parameter tensors for the backbone."""

    def __init__(self, tensors: dict):
        self.tensors = tensors

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def names(self):
        return list(self.tensors.keys())

    @property
    def num_classes(self) -> int:
        return self.tensors["head.bias"].shape[0]

    def copy(self) -> "ModelParams":
        return ModelParams({n: Tensor(t.data.copy())
                            for n, t in self.tensors.items()})

    def zero_grads(self) -> None:
        for t in self.tensors.values():
            t.grad = None


def init_params(seed: int, num_classes: int) -> ModelParams:
    """Seeded uniform init, bound sqrt(6 / fan_in) per kernel; biases zero.

    The generator is consumed kernel-by-kernel in layer_shapes order, so a
    given seed always yields bitwise-identical parameters.
    """
    if num_classes < 2:
        raise ValueError("num_classes must be >= 2")
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in layer_shapes(num_classes).items():
        if name.endswith(".kernel"):
            fan_in = shape[1] * shape[2] * shape[3]
            bound = np.sqrt(6.0 / fan_in)
            tensors[name] = Tensor(rng.uniform(-bound, bound, size=shape))
        else:
            tensors[name] = Tensor(np.zeros(shape))
    return ModelParams(tensors)


def forward(params: ModelParams, image: Tensor, tape=None) -> Tensor:
    """Run the backbone on a [3,H,W] image, returning [C,H,W] logits."""
    _, h, w = image.shape
    if h % 2 or w % 2:
        raise ShapeError(f"spatial size {h}x{w} must be even")
    p = params.tensors
    e1 = relu(tape, conv2d(tape, image, p["enc1.kernel"], p["enc1.bias"],
                           stride=1, pad=1))
    d = relu(tape, conv2d(tape, e1, p["down.kernel"], p["down.bias"],
                          stride=2, pad=1))
    e2 = relu(tape, conv2d(tape, d, p["enc2.kernel"], p["enc2.bias"],
                           stride=1, pad=1))
    u = relu(tape, conv2d(tape, nearest_upsample2x(tape, e2),
                          p["up.kernel"], p["up.bias"], stride=1, pad=1))
    return conv2d(tape, concat_channels(tape, u, e1),
                  p["head.kernel"], p["head.bias"], stride=1, pad=0)
