"""Parameter containers: a minimal module tree over :mod:`functional` ops."""
from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import functional as F
from .tensor import Tensor


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True, op="param")


def fan_in_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape)


class Module:
    """Attributes holding parameters, modules, or lists of modules form the tree."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Linear(Module):
    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, bias: bool = True):
        self.weight = parameter(fan_in_uniform(rng, (c_out, c_in), c_in))
        self.bias = parameter(np.zeros(c_out)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return F.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, channels: int, axis: int = 0):
        self.scale = parameter(np.ones(channels))
        self.shift = parameter(np.zeros(channels))
        self.axis = axis

    def forward(self, x: Tensor) -> Tensor:
        return F.layer_norm(x, self.scale, self.shift, axis=self.axis)


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, rng: np.random.Generator,
                 stride: int = 1, bias: bool = True):
        if kernel not in (1, 3):
            raise ValueError(f"Conv2d: kernel must be 1 or 3, got {kernel}")
        self.weight = parameter(fan_in_uniform(rng, (c_out, c_in, kernel, kernel), c_in * kernel * kernel))
        self.bias = parameter(np.zeros(c_out)) if bias else None
        self.stride = stride

    def forward(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.bias, stride=self.stride)

    def set_identity(self):
        """Centre-tap identity on the first ``min(c_in, c_out)`` channels, zero elsewhere."""
        w = np.zeros_like(self.weight.data)
        c = w.shape[2] // 2
        n = min(w.shape[0], w.shape[1])
        w[np.arange(n), np.arange(n), c, c] = 1.0
        self.weight.data = w
        if self.bias is not None:
            self.bias.data = np.zeros_like(self.bias.data)


class Deconv2d(Module):
    """3x3 stride-2 transposed conv; ``exact_double`` crops so that H -> 2H."""

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, exact_double: bool = True,
                 bias: bool = True):
        self.weight = parameter(fan_in_uniform(rng, (c_in, c_out, 3, 3), c_in * 9))
        self.bias = parameter(np.zeros(c_out)) if bias else None
        self.padding, self.output_padding = (1, 1) if exact_double else (0, 0)

    def forward(self, x: Tensor) -> Tensor:
        return F.deconv2d(x, self.weight, self.bias, stride=2, padding=self.padding,
                          output_padding=self.output_padding)
