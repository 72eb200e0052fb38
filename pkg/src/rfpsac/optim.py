"""Momentum SGD over an explicit parameter list."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .errors import UsageError
from .tensor import Tensor


class SGD:
    """v <- momentum*v + g;  p <- p - lr*v;  grads cleared after each step."""

    def __init__(self, params: Sequence[Tensor], lr: float, momentum: float = 0.0):
        self.params = list(params)
        self.lr = float(lr)
        self.momentum = float(momentum)
        self._velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        for p, v in zip(self.params, self._velocity):
            if p.grad is None:
                raise UsageError("sgd_step: parameter has no gradient (run backward first)")
            v *= self.momentum
            v += p.grad
            p.data = p.data - self.lr * v
            p.grad = None

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def sgd_step(params: Sequence[Tensor], lr: float, momentum: float = 0.0,
             state: SGD | None = None) -> SGD:
    """One optimizer step; pass back the returned state to keep momentum."""
    if state is None:
        state = SGD(params, lr, momentum)
    else:
        state.lr = float(lr)
        state.momentum = float(momentum)
    state.step()
    return state
