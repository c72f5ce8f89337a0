"""Adam optimizer and cosine-annealing schedule with warm restarts."""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor


class Adam:
    def __init__(self, params, lr=3e-4, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self, lr=None):
        lr = self.lr if lr is None else lr
        self.t += 1
        bc1 = 1.0 - self.b1 ** self.t
        bc2 = 1.0 - self.b2 ** self.t
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad.astype(p.data.dtype, copy=False)
            self.m[i] = self.b1 * self.m[i] + (1 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1 - self.b2) * (g * g)
            mhat = self.m[i] / bc1
            vhat = self.v[i] / bc2
            upd = p.data - lr * mhat / (np.sqrt(vhat) + self.eps)
            p.data = upd.astype(p.data.dtype, copy=False)


class CosineRestarts:
    """Learning rate decaying from lr0 to 0 over each cycle, restarting.

    total_steps is split into `restarts` equal cycles; within a cycle
    lr(t) = 0.5 * lr0 * (1 + cos(pi * t / cycle_len)).
    """

    def __init__(self, lr0, total_steps, restarts=10):
        if restarts < 1 or total_steps < 1:
            raise ValueError("restarts and total_steps must be >= 1")
        self.lr0 = lr0
        self.cycle = max(1, total_steps // restarts)

    def lr(self, step):
        pos = (step % self.cycle) / self.cycle
        return float(0.5 * self.lr0 * (1.0 + np.cos(np.pi * pos)))
