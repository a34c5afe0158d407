"""Nesterov-accelerated Adam."""

from __future__ import annotations

import numpy as np

from .layers import Param


class NonFiniteGradient(FloatingPointError):
    pass


class Nadam:
    def __init__(self, params: list[Param], beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self, lr: float) -> None:
        for p in self.params:
            if not np.all(np.isfinite(p.grad)):
                raise NonFiniteGradient(f"non-finite gradient in {p.name}")
        self.t += 1
        b1, b2, t = self.beta1, self.beta2, self.t
        c_next = 1.0 - b1 ** (t + 1)
        c_now = 1.0 - b1**t
        c2 = 1.0 - b2**t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            m_bar = b1 * m / c_next + (1 - b1) * g / c_now
            p.value -= (lr * m_bar / (np.sqrt(v / c2) + self.eps)).astype(p.value.dtype, copy=False)

    def state_arrays(self) -> list[np.ndarray]:
        return self.m + self.v
