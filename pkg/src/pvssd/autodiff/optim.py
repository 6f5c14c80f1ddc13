"""Adam with decoupled weight decay and a one-cycle learning-rate schedule."""
from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .tensor import Tensor


def one_cycle(step: int, total: int, max_lr: float, pct_start: float = 0.4,
              div_factor: float = 10.0, final_div_factor: float = 1e4,
              base_momentum: float = 0.85, max_momentum: float = 0.95) -> tuple[float, float]:
    """Learning rate and first-moment coefficient at ``step`` of ``total`` (cosine annealing)."""
    total = max(total, 1)
    initial = max_lr / div_factor
    final = initial / final_div_factor
    warm = max(int(round(pct_start * total)), 1)

    def cos_interp(a, b, frac):
        return b + (a - b) * (1.0 + math.cos(math.pi * frac)) / 2.0

    if step < warm:
        frac = step / warm
        return cos_interp(initial, max_lr, frac), cos_interp(max_momentum, base_momentum, frac)
    frac = min((step - warm) / max(total - warm, 1), 1.0)
    return cos_interp(max_lr, final, frac), cos_interp(base_momentum, max_momentum, frac)


class Adam:
    def __init__(self, params: Sequence[Tensor], lr: float = 0.003, betas=(0.9, 0.99),
                 eps: float = 1e-8, weight_decay: float = 0.01):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            if self.weight_decay:
                p.data = p.data * (1.0 - self.lr * self.weight_decay)
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
