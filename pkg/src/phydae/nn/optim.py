"""AdamW with decoupled weight decay and a warmup + cosine schedule."""
from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .tensor import Param


class AdamW:
    def __init__(self, params: Sequence[Param], lr: float = 1e-4, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 1e-2):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
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
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if lr == 0.0:
                continue
            p.data = p.data - lr * (update + self.weight_decay * p.data)


def warmup_cosine(step: int, total_steps: int, warmup_steps: int, lr_max: float, lr_min: float) -> float:
    """Learning rate for 0-based ``step``.

    Linear warmup gives lr_max * (step + 1) / warmup_steps; afterwards cosine
    annealing lands exactly on lr_min at the final step.
    """
    if total_steps <= 0:
        raise ValueError("total_steps must be positive")
    if step < warmup_steps:
        return lr_max * (step + 1) / warmup_steps
    tail = total_steps - 1 - warmup_steps
    if tail <= 0:
        return lr_min
    progress = min(1.0, (step - warmup_steps) / tail)
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * progress))
