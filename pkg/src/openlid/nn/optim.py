"""AdamW with decoupled weight decay."""

from __future__ import annotations

import math

import numpy as np


class AdamW:
    """Adam update plus ``theta -= lr * weight_decay * theta`` on masked params.

    Parameters are updated in place. ``decay_mask`` maps parameter name to
    whether decoupled decay applies (batch-norm parameters and biases are
    normally excluded).
    """

    def __init__(self, params: dict[str, np.ndarray], lr=1e-3, betas=(0.9, 0.999), eps=1e-8,
                 weight_decay=0.01, decay_mask: dict[str, bool] | None = None):
        if lr <= 0:
            raise ValueError(f"invalid lr {lr}")
        if not (0.0 <= betas[0] < 1.0 and 0.0 <= betas[1] < 1.0):
            raise ValueError(f"invalid betas {betas}")
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.decay_mask = decay_mask or {k: True for k in params}
        self.step_count = 0
        self.exp_avg = {k: np.zeros_like(v) for k, v in params.items()}
        self.exp_avg_sq = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.step_count += 1
        t = self.step_count
        bias1 = 1.0 - self.beta1 ** t
        bias2 = 1.0 - self.beta2 ** t
        step_size = self.lr / bias1
        for name, p in self.params.items():
            g = grads[name].astype(p.dtype, copy=False)
            m = self.exp_avg[name]
            v = self.exp_avg_sq[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            if self.weight_decay and self.decay_mask.get(name, False):
                p *= 1.0 - self.lr * self.weight_decay
            denom = np.sqrt(v) / math.sqrt(bias2) + self.eps
            p -= (step_size * m / denom).astype(p.dtype, copy=False)
