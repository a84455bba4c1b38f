from __future__ import annotations

import numpy as np

from ..errors import ShapeMismatch


class RMSProp:
    """RMSProp: acc = rho*acc + (1-rho)*g^2;  p -= lr * g / (sqrt(acc) + eps)."""

    def __init__(self, params, lr=1e-3, rho=0.9, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.rho = rho
        self.eps = eps
        self.acc = [np.zeros_like(p.data) for p in self.params]

    def step(self, grads=None):
        if grads is None:
            grads = [p.grad for p in self.params]
        rmsprop_step(self.params, grads, self)

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def state_arrays(self):
        return self.acc


def rmsprop_step(params, grads, state: RMSProp):
    """Apply one update in place; ``None`` gradients leave a parameter untouched."""
    if len(params) != len(grads):
        raise ShapeMismatch("one gradient per parameter required")
    for p, g, acc in zip(params, grads, state.acc):
        if g is None:
            continue
        if g.shape != p.data.shape:
            raise ShapeMismatch(f"gradient shape {g.shape} != parameter shape {p.data.shape}")
        acc *= state.rho
        acc += (1.0 - state.rho) * g * g
        p.data -= state.lr * g / (np.sqrt(acc) + state.eps)
    return params
