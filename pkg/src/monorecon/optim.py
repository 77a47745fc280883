"""Adaptive-moment optimizer with decoupled weight decay.

Operates on flat name -> ndarray parameter dictionaries; update order is the
sorted parameter name order, so runs are reproducible.
"""

from __future__ import annotations

import numpy as np


class AdamW:
    def __init__(self, lr: float = 1e-4, betas: tuple[float, float] = (0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.0,
                 lr_multipliers: dict[str, float] | None = None) -> None:
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        # optional per-parameter-name step scaling (matched by prefix)
        self.lr_multipliers = dict(lr_multipliers or {})
        self.t = 0
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}

    def _mult_for(self, name: str) -> float:
        best = 1.0
        best_len = -1
        for prefix, mult in self.lr_multipliers.items():
            if name.startswith(prefix) and len(prefix) > best_len:
                best, best_len = mult, len(prefix)
        return best

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        """Update ``params`` in place with the gradients present in ``grads``."""
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name in sorted(grads):
            g = grads[name]
            p = params[name]
            if name not in self._m:
                self._m[name] = np.zeros_like(p)
                self._v[name] = np.zeros_like(p)
            m = self._m[name]
            v = self._v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            lr = self.lr * self._mult_for(name)
            step = lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if self.weight_decay:
                p -= lr * self.weight_decay * p
            p -= step
