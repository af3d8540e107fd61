"""Parameter containers for the small convolutional network."""

from __future__ import annotations

import numpy as np

from . import functional as F
from .autograd import Tensor


def he_normal(rng: np.random.Generator, shape: tuple, fan_in: int) -> Tensor:
    return Tensor(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape), requires_grad=True)


class Conv2d:
    def __init__(self, rng: np.random.Generator, c_in: int, c_out: int, kernel: int = 3,
                 stride: int = 1, bias: bool = True):
        self.weight = he_normal(rng, (c_out, c_in, kernel, kernel), c_in * kernel * kernel)
        self.bias = Tensor(np.zeros(c_out), requires_grad=True) if bias else None
        self.stride = stride
        self.padding = kernel // 2

    def __call__(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.bias, self.stride, self.padding)

    def parameters(self, prefix: str = "") -> dict:
        params = {f"{prefix}weight": self.weight}
        if self.bias is not None:
            params[f"{prefix}bias"] = self.bias
        return params
