"""Adam with in-place updates over a flat list of parameter arrays."""

from __future__ import annotations

import numpy as np


class Adam:
    def __init__(self, params, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = float(lr)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in self.params]
        self.v = [np.zeros_like(p) for p in self.params]
        self.t = 0

    def step(self, grads):
        """Apply one update. ``grads`` aligns with ``params``; None entries skip."""
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for p, m, v, g in zip(self.params, self.m, self.v, grads):
            if g is None:
                continue
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def step_decay(base_lr, epoch, factor, interval):
    """Learning rate after stepwise decay: base * factor^(epoch // interval)."""
    return base_lr * factor ** (epoch // interval)


def decay_at(base_lr, epoch, milestones, factor=0.5):
    """Learning rate with decay applied at explicit epoch milestones."""
    lr = base_lr
    for m in milestones:
        if epoch >= m:
            lr *= factor
    return lr
