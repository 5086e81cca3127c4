"""Stochastic gradient descent with momentum and a step-decay schedule."""

from __future__ import annotations

from bisect import bisect_right
from dataclasses import dataclass, field
from typing import Mapping

from .errors import MissingGradient
from .tensor import Tensor


@dataclass
class SGDState:
    base_lr: float = 0.001
    decay_factor: float = 0.1
    decay_iters: tuple = ()
    momentum: float = 0.9
    weight_decay: float = 0.0
    iteration: int = 0
    velocity: dict = field(default_factory=dict)

    def lr_at(self, t: int) -> float:
        """``base_lr * decay_factor ** (number of decay iterations <= t)``."""
        return self.base_lr * self.decay_factor ** bisect_right(sorted(self.decay_iters), t)

    @property
    def lr(self) -> float:
        return self.lr_at(self.iteration)


def _named(params) -> Mapping[str, Tensor]:
    if isinstance(params, Mapping):
        return params
    return {str(i): p for i, p in enumerate(params)}


def sgd_step(params, state: SGDState) -> float:
    """Apply one update ``p -= lr * v`` with ``v = momentum * v + grad``.

    Returns the learning rate used. Gradients are cleared afterwards.
    """
    named = _named(params)
    missing = [k for k, p in named.items() if p.grad is None]
    if missing:
        raise MissingGradient(f"no gradient for parameters: {missing}")
    lr = state.lr
    for name, p in named.items():
        g = p.grad
        if state.weight_decay:
            g = g + state.weight_decay * p.data
        if state.momentum:
            v = state.velocity.get(name)
            v = g.copy() if v is None else state.momentum * v + g
            state.velocity[name] = v
            step = v
        else:
            step = g
        p.data = (p.data - lr * step).astype(p.data.dtype, copy=False)
        p.grad = None
    state.iteration += 1
    return lr
