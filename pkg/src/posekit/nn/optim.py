from __future__ import annotations

import numpy as np

from .layers import Parameter


class Adam:
    """Adam over a name -> Parameter mapping; names in ``frozen`` are skipped."""

    def __init__(self, params: dict[str, Parameter], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = {k: 0 for k in params}

    def step(self, lr: float | None = None, frozen=()):
        lr = self.lr if lr is None else lr
        for k, p in self.params.items():
            if k in frozen:
                continue
            self.t[k] += 1
            t = self.t[k]
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * p.grad
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * p.grad * p.grad
            mhat = self.m[k] / (1 - self.b1 ** t)
            vhat = self.v[k] / (1 - self.b2 ** t)
            p.data -= lr * mhat / (np.sqrt(vhat) + self.eps)

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()


def cosine_lr(base: float, step: int, total: int, floor: float = 0.02) -> float:
    """Cosine decay from ``base`` to ``floor * base`` over ``total`` steps."""
    if total <= 1:
        return base
    frac = min(step / (total - 1), 1.0)
    return float(base * (floor + (1 - floor) * 0.5 * (1 + np.cos(np.pi * frac))))
