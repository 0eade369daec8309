"""
Stochastic gradient descent with momentum.
"""
from __future__ import annotations

from typing import Dict, Sequence

import numpy as np

from msdd.autodiff.tensor import Parameter, ShapeError


class OptimState:
    """Learning rate, momentum and one velocity buffer per parameter name."""

    def __init__(self, learning_rate: float, momentum: float, velocity: Dict[str, np.ndarray] | None = None):
        if learning_rate <= 0:
            raise ValueError(f"learning_rate must be positive, got {learning_rate}.")
        if not 0 <= momentum < 1:
            raise ValueError(f"momentum must lie in [0, 1), got {momentum}.")
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.velocity: Dict[str, np.ndarray] = velocity if velocity is not None else {}

    @classmethod
    def for_parameters(cls, params: Sequence[Parameter], learning_rate: float, momentum: float) -> OptimState:
        return cls(learning_rate, momentum, {p.name: np.zeros_like(p.data) for p in params})

    def check(self, params: Sequence[Parameter]) -> None:
        for p in params:
            velocity = self.velocity.get(p.name)
            if velocity is None:
                raise KeyError(f"No velocity buffer for parameter {p.name}.")
            if velocity.shape != p.shape:
                raise ShapeError(f"Velocity of {p.name} has shape {velocity.shape}, parameter has {p.shape}.")


def clip_grad_norm(params: Sequence[Parameter], max_norm: float) -> float:
    """Rescale unfrozen gradients in place so their global L2 norm is at most ``max_norm``.

    :return: the norm before clipping
    """
    grads = [p.grad for p in params if not p.frozen and p.grad is not None]
    total = float(np.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads)))
    if total > max_norm > 0:
        factor = max_norm / total
        for p in params:
            if not p.frozen and p.grad is not None:
                p.grad = (p.grad * factor).astype(p.dtype)
    return total


def zero_grad(params: Sequence[Parameter]) -> None:
    for p in params:
        p.grad = None


def sgd_step(params: Sequence[Parameter], state: OptimState) -> None:
    """v <- momentum * v + grad; p <- p - lr * v for unfrozen parameters, then clear all gradients."""
    state.check(params)
    for p in params:
        if p.frozen:
            continue
        if p.grad is None:
            raise RuntimeError(f"Parameter {p.name} is trainable but has no gradient.")

    for p in params:
        if p.frozen:
            continue
        velocity = state.velocity[p.name]
        velocity *= velocity.dtype.type(state.momentum)
        velocity += p.grad
        p.data -= p.dtype.type(state.learning_rate) * velocity
    zero_grad(params)
