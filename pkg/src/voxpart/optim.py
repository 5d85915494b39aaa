"""Adam-style first/second-moment optimizer over named parameter dicts."""

from __future__ import annotations

import numpy as np

from .tensor import GradMap, Tensor


class Adam:
    def __init__(self, params: dict[str, Tensor], lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step_count = 0
        self._m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self._v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, grads: GradMap) -> float:
        """Apply one update; returns the global gradient norm (0 if no grads)."""
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.step_count
        c2 = 1.0 - b2 ** self.step_count
        sq = 0.0
        for k, p in self.params.items():
            g = grads.grad(p)
            if g is None:
                continue
            sq += float((g.astype(np.float64) ** 2).sum())
            m = self._m[k]
            v = self._v[k]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return float(np.sqrt(sq))
