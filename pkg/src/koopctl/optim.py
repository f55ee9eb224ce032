"""Adam optimizer over ndmath tensors.

Parameter data is rebound, never mutated, so detached views taken before a
step keep their old values. Optimizer state (first/second moments, step
count) is exposed for checkpointing so resumed runs continue bit-for-bit.
"""

from __future__ import annotations

import numpy as np

from .ndmath import Tensor


class Adam:
    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params: list[Tensor] = list(params)
        if not all(p.requires_grad for p in self.params):
            raise ValueError("Adam got a parameter with requires_grad=False")
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        """One Adam update from the gradients currently on the parameters."""
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            if g is None:
                continue
            m[...] = b1 * m + (1.0 - b1) * g
            v[...] = b2 * v + (1.0 - b2) * (g * g)
            p.data = p.data - self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    # -- checkpoint plumbing -------------------------------------------------
    def get_state(self):
        return {
            "t": self.t,
            "m": [m.copy() for m in self.m],
            "v": [v.copy() for v in self.v],
        }

    def set_state(self, state):
        self.t = int(state["t"])
        if len(state["m"]) != len(self.params):
            raise ValueError("optimizer state does not match parameter count")
        for slot, saved in zip(self.m, state["m"]):
            slot[...] = saved
        for slot, saved in zip(self.v, state["v"]):
            slot[...] = saved
