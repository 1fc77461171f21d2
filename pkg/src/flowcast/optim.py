"""Adam and cosine annealing."""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .tensor import Tensor


class Adam:
    """Adam with bias correction; updates tensors' ``.data`` in place."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, grads: Sequence[np.ndarray], lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_dict(self) -> dict:
        return {"t": self.t, "m": [a.copy() for a in self.m], "v": [a.copy() for a in self.v]}


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: Adam,
              lr: float | None = None) -> Sequence[Tensor]:
    state.step(grads, lr)
    return params


def cosine_schedule(step: float, total: float, v_max: float, v_min: float) -> float:
    """``v_min + (v_max - v_min) * (1 + cos(pi * step / total)) / 2``."""
    if total <= 0:
        return v_min
    if not 0 <= step <= total:
        raise ValueError(f"step {step} outside [0, {total}]")
    return v_min + 0.5 * (v_max - v_min) * (1.0 + math.cos(math.pi * step / total))
