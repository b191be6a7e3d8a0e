"""Adam and the multi-step learning-rate schedule used for pose training."""

from __future__ import annotations

from bisect import bisect_right
from typing import Sequence

import numpy as np

from .nn import Parameter


class Adam:
    def __init__(self, params: Sequence[Parameter], lr: float = 1e-4, betas: tuple[float, float] = (0.9, 0.99),
                 eps: float = 1e-8, weight_decay: float = 0.0):
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

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)


class MultiStepSchedule:
    """``base_lr * factor ** (number of milestones <= epoch)``."""

    def __init__(self, base_lr: float, milestones: Sequence[int], factor: float):
        if list(milestones) != sorted(set(milestones)):
            raise ValueError(f"milestones must be strictly increasing, got {list(milestones)}")
        self.base_lr = base_lr
        self.milestones = list(milestones)
        self.factor = factor

    def lr_at(self, epoch: float) -> float:
        return self.base_lr * self.factor ** bisect_right(self.milestones, epoch)
