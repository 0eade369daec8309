"""
Central finite-difference gradient checking.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from msdd.autodiff import ops
from msdd.autodiff.tensor import Tape, Tensor, backward


def _scalarize(out: Tensor, projection: np.ndarray | None) -> Tensor:
    if out.data.size == 1:
        return ops.reshape(out, ())
    return ops.sum(ops.mul(out, Tensor(projection, dtype=out.dtype)))


def gradcheck(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    h: float = 1e-5,
    seed: int = 0,
) -> float:
    """Compare analytic and numeric gradients of ``fn`` with respect to ``inputs``.

    Non-scalar outputs are reduced with a fixed random projection. The relative
    error of each input is ||analytic - numeric|| / max(||analytic||, ||numeric||, 1e-8).

    :return: the largest relative error over all inputs
    """
    for t in inputs:
        if t.dtype != np.float64:
            raise TypeError("gradcheck needs float64 inputs.")
        t.grad = None

    sample = fn(*inputs)
    projection = None
    if sample.data.size != 1:
        projection = np.random.default_rng(seed).standard_normal(sample.shape)

    with Tape() as tape:
        loss = _scalarize(fn(*inputs), projection)
    backward(loss, tape)

    worst = 0.0
    for t in inputs:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        numeric = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + h
            upper = _scalarize(fn(*inputs), projection).item()
            flat[i] = original - h
            lower = _scalarize(fn(*inputs), projection).item()
            flat[i] = original
            numeric.reshape(-1)[i] = (upper - lower) / (2 * h)
        scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-8)
        worst = max(worst, float(np.linalg.norm(analytic - numeric) / scale))
    return worst
