"""
Differentiable primitives.

Every primitive computes its forward value with numpy and hands a closure
computing the vector-Jacobian product to ``make_result``. Shapes are checked
explicitly; there is no implicit broadcasting.
"""
from __future__ import annotations

import math
from typing import Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import as_strided

from msdd.autodiff.tensor import NonFiniteError, ShapeError, Tensor, make_result


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}.")


# -----------------------------------------------------------------------------
# Elementwise arithmetic
# -----------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return make_result("add", (a, b), a.data + b.data, lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return make_result("sub", (a, b), a.data - b.data, lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    return make_result("mul", (a, b), a.data * b.data, lambda g: (g * b.data, g * a.data))


def scale(a: Tensor, factor: float) -> Tensor:
    return make_result("scale", (a,), a.data * a.dtype.type(factor), lambda g: (g * a.dtype.type(factor),))


def square(a: Tensor) -> Tensor:
    return make_result("square", (a,), a.data * a.data, lambda g: (2.0 * a.data * g,))


def relu(a: Tensor) -> Tensor:
    # Subgradient at 0 is 0
    mask = a.data > 0
    return make_result("relu", (a,), np.where(mask, a.data, 0).astype(a.dtype), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    out = np.exp(-np.logaddexp(0, -a.data)).astype(a.dtype)
    return make_result("sigmoid", (a,), out, lambda g: (g * out * (1 - out),))


def log(a: Tensor) -> Tensor:
    if (a.data <= 0).any():
        raise NonFiniteError("log: input must be strictly positive.")
    return make_result("log", (a,), np.log(a.data), lambda g: (g / a.data,))


def clamp(a: Tensor, low: float, high: float) -> Tensor:
    inside = (a.data >= low) & (a.data <= high)
    out = np.clip(a.data, low, high).astype(a.dtype)
    return make_result("clamp", (a,), out, lambda g: (g * inside,))


def smooth_l1(a: Tensor, beta: float = 1.0) -> Tensor:
    """Elementwise Huber-style loss: 0.5 x^2 / beta below beta, |x| - 0.5 beta above."""
    absolute = np.abs(a.data)
    small = absolute < beta
    out = np.where(small, 0.5 * a.data * a.data / beta, absolute - 0.5 * beta).astype(a.dtype)
    return make_result(
        "smooth_l1",
        (a,),
        out,
        lambda g: (g * np.where(small, a.data / beta, np.sign(a.data)),),
    )


def binary_cross_entropy(p: Tensor, targets: np.ndarray, eps: float = 1e-6) -> Tensor:
    """Elementwise BCE on probabilities clamped to [eps, 1 - eps]."""
    if p.shape != targets.shape:
        raise ShapeError(f"binary_cross_entropy: shape mismatch {p.shape} vs {targets.shape}.")
    y = targets.astype(p.dtype)
    clipped = np.clip(p.data, eps, 1 - eps)
    inside = (p.data >= eps) & (p.data <= 1 - eps)
    out = -(y * np.log(clipped) + (1 - y) * np.log(1 - clipped))

    def _backward(g):
        return (g * inside * (-(y / clipped) + (1 - y) / (1 - clipped)),)

    return make_result("binary_cross_entropy", (p,), out.astype(p.dtype), _backward)


# -----------------------------------------------------------------------------
# Reductions and layout
# -----------------------------------------------------------------------------


def sum(a: Tensor) -> Tensor:  # noqa: A001
    return make_result("sum", (a,), np.asarray(a.data.sum(), dtype=a.dtype), lambda g: (np.full(a.shape, g, a.dtype),))


def mean(a: Tensor) -> Tensor:
    n = a.data.size
    return make_result(
        "mean",
        (a,),
        np.asarray(a.data.sum() / n, dtype=a.dtype),
        lambda g: (np.full(a.shape, g / n, a.dtype),),
    )


def reshape(a: Tensor, shape: Tuple[int, ...]) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError as ex:
        raise ShapeError(f"reshape: cannot reshape {a.shape} into {shape}.") from ex
    return make_result("reshape", (a,), out, lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    inverse = np.argsort(axes)
    out = np.ascontiguousarray(a.data.transpose(axes))
    return make_result("transpose", (a,), out, lambda g: (g.transpose(inverse),))


def stack(tensors: Sequence[Tensor]) -> Tensor:
    if not tensors:
        raise ShapeError("stack: empty input.")
    for t in tensors[1:]:
        _same_shape("stack", tensors[0], t)
    out = np.stack([t.data for t in tensors])
    return make_result("stack", tuple(tensors), out, lambda g: tuple(g[i] for i in range(len(tensors))))


def take(a: Tensor, indices: np.ndarray) -> Tensor:
    """Gather rows of ``a`` along its first axis."""
    indices = np.asarray(indices, dtype=np.int64)
    out = a.data[indices]

    def _backward(g):
        grad = np.zeros_like(a.data)
        np.add.at(grad, indices, g)
        return (grad,)

    return make_result("take", (a,), out, _backward)


def gather_flat(a: Tensor, flat_indices: np.ndarray) -> Tensor:
    """Pick ``a.ravel()[flat_indices]``; the output takes the indices' shape."""
    flat_indices = np.asarray(flat_indices, dtype=np.int64)
    out = a.data.reshape(-1)[flat_indices]

    def _backward(g):
        grad = np.zeros(a.data.size, dtype=a.dtype)
        np.add.at(grad, flat_indices.reshape(-1), g.reshape(-1))
        return (grad.reshape(a.shape),)

    return make_result("gather_flat", (a,), out, _backward)


# -----------------------------------------------------------------------------
# Dense layers
# -----------------------------------------------------------------------------


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    if x.ndim != 1 or weight.ndim != 2 or bias.ndim != 1:
        raise ShapeError(f"linear: expected [n], [k,n], [k], got {x.shape}, {weight.shape}, {bias.shape}.")
    if weight.shape[1] != x.shape[0] or weight.shape[0] != bias.shape[0]:
        raise ShapeError(f"linear: incompatible shapes {x.shape}, {weight.shape}, {bias.shape}.")
    out = weight.data @ x.data + bias.data
    return make_result(
        "linear",
        (x, weight, bias),
        out,
        lambda g: (weight.data.T @ g, np.outer(g, x.data), g),
    )


def softmax(logits: Tensor) -> Tensor:
    if logits.ndim != 1 or logits.shape[0] < 1:
        raise ShapeError(f"softmax expects a non-empty vector, got {logits.shape}.")
    shifted = logits.data - logits.data.max()
    e = np.exp(shifted)
    out = e / e.sum()
    return make_result("softmax", (logits,), out, lambda g: (out * (g - np.dot(g, out)),))


def log_softmax(logits: Tensor) -> Tensor:
    if logits.ndim != 1 or logits.shape[0] < 1:
        raise ShapeError(f"log_softmax expects a non-empty vector, got {logits.shape}.")
    shifted = logits.data - logits.data.max()
    log_norm = np.log(np.exp(shifted).sum())
    out = shifted - log_norm
    probs = np.exp(out)
    return make_result("log_softmax", (logits,), out, lambda g: (g - probs * g.sum(),))


# -----------------------------------------------------------------------------
# Spatial primitives, layout [C, H, W]
# -----------------------------------------------------------------------------


def _im2col(padded: np.ndarray, kh: int, kw: int, stride: int, out_h: int, out_w: int) -> np.ndarray:
    channels = padded.shape[0]
    s_c, s_h, s_w = padded.strides
    windows = as_strided(
        padded,
        shape=(channels, kh, kw, out_h, out_w),
        strides=(s_c, s_h, s_w, stride * s_h, stride * s_w),
        writeable=False,
    )
    return np.ascontiguousarray(windows).reshape(channels * kh * kw, out_h * out_w)


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Zero-padded cross-correlation; output extent uses floor division."""
    if x.ndim != 3 or kernel.ndim != 4 or bias.ndim != 1:
        raise ShapeError(
            f"conv2d: expected input [C,H,W], kernel [O,C,kH,kW], bias [O], "
            f"got {x.shape}, {kernel.shape}, {bias.shape}."
        )
    if stride < 1 or pad < 0:
        raise ValueError(f"conv2d: stride must be positive and pad non-negative, got {stride}, {pad}.")
    channels, height, width = x.shape
    out_channels, in_channels, kh, kw = kernel.shape
    if in_channels != channels:
        raise ShapeError(f"conv2d: kernel expects {in_channels} input channels, input has {channels}.")
    if bias.shape[0] != out_channels:
        raise ShapeError(f"conv2d: bias has {bias.shape[0]} entries for {out_channels} output channels.")
    if kh > height + 2 * pad or kw > width + 2 * pad:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {height + 2 * pad}x{width + 2 * pad}.")

    out_h = (height + 2 * pad - kh) // stride + 1
    out_w = (width + 2 * pad - kw) // stride + 1
    padded = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad))) if pad else np.ascontiguousarray(x.data)
    cols = _im2col(padded, kh, kw, stride, out_h, out_w)
    weights = kernel.data.reshape(out_channels, -1)
    out = (weights @ cols + bias.data[:, None]).reshape(out_channels, out_h, out_w)

    def _backward(g):
        g2 = g.reshape(out_channels, -1)
        grad_kernel = (g2 @ cols.T).reshape(kernel.shape) if kernel.needs_grad else None
        grad_bias = g2.sum(axis=1) if bias.needs_grad else None
        grad_input = None
        if x.needs_grad:
            grad_cols = (weights.T @ g2).reshape(channels, kh, kw, out_h, out_w)
            grad_padded = np.zeros_like(padded)
            row_span = stride * (out_h - 1) + 1
            col_span = stride * (out_w - 1) + 1
            for i in range(kh):
                for j in range(kw):
                    grad_padded[:, i : i + row_span : stride, j : j + col_span : stride] += grad_cols[:, i, j]
            grad_input = grad_padded[:, pad : pad + height, pad : pad + width]
        return grad_input, grad_kernel, grad_bias

    return make_result("conv2d", (x, kernel, bias), out, _backward)


def channel_scale(features: Tensor, weights: Tensor) -> Tensor:
    """1x1 depth-wise convolution without bias: out[c] = features[c] * weights[c]."""
    if features.ndim != 3 or weights.ndim != 1 or features.shape[0] != weights.shape[0]:
        raise ShapeError(f"channel_scale: channel mismatch between {features.shape} and {weights.shape}.")
    w = weights.data[:, None, None]
    out = features.data * w
    return make_result(
        "channel_scale",
        (features, weights),
        out,
        lambda g: (g * w, (g * features.data).sum(axis=(1, 2))),
    )


def maxpool2(x: Tensor) -> Tensor:
    """2x2 max pooling, stride 2. Ties resolve to the first cell in row-major order."""
    if x.ndim != 3:
        raise ShapeError(f"maxpool2 expects [C,H,W], got {x.shape}.")
    channels, height, width = x.shape
    if height % 2 or width % 2:
        raise ShapeError(f"maxpool2 needs even extents, got {height}x{width}.")
    windows = (
        x.data.reshape(channels, height // 2, 2, width // 2, 2)
        .transpose(0, 1, 3, 2, 4)
        .reshape(channels, height // 2, width // 2, 4)
    )
    argmax = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, argmax[..., None], axis=-1)[..., 0]

    def _backward(g):
        grad = np.zeros_like(windows)
        np.put_along_axis(grad, argmax[..., None], g[..., None], axis=-1)
        grad = grad.reshape(channels, height // 2, width // 2, 2, 2).transpose(0, 1, 3, 2, 4)
        return (grad.reshape(channels, height, width),)

    return make_result("maxpool2", (x,), out, _backward)


def avgpool2(x: Tensor) -> Tensor:
    if x.ndim != 3 or x.shape[1] % 2 or x.shape[2] % 2:
        raise ShapeError(f"avgpool2 expects [C,H,W] with even extents, got {x.shape}.")
    channels, height, width = x.shape
    out = x.data.reshape(channels, height // 2, 2, width // 2, 2).mean(axis=(2, 4))
    return make_result(
        "avgpool2",
        (x,),
        out.astype(x.dtype),
        lambda g: (np.repeat(np.repeat(g, 2, axis=1), 2, axis=2) / 4,),
    )


def upsample2_nearest(x: Tensor) -> Tensor:
    if x.ndim != 3:
        raise ShapeError(f"upsample2_nearest expects [C,H,W], got {x.shape}.")
    channels, height, width = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=1), 2, axis=2)
    return make_result(
        "upsample2_nearest",
        (x,),
        out,
        lambda g: (g.reshape(channels, height, 2, width, 2).sum(axis=(2, 4)),),
    )


def global_max_pool(x: Tensor) -> Tensor:
    """[C,H,W] -> [C], first maximum in row-major order."""
    if x.ndim != 3:
        raise ShapeError(f"global_max_pool expects [C,H,W], got {x.shape}.")
    channels = x.shape[0]
    plane = x.shape[1] * x.shape[2]
    flat = x.data.reshape(channels, plane).argmax(axis=1) + np.arange(channels) * plane
    return gather_flat(x, flat)


def bin_edges(start: int, stop: int, bins: int) -> list[Tuple[int, int]]:
    """Split [start, stop) into ``bins`` near-equal, non-empty, possibly overlapping ranges."""
    length = stop - start
    return [(start + math.floor(k * length / bins), start + math.ceil((k + 1) * length / bins)) for k in range(bins)]


def roi_max_pool(features: Tensor, region: Tuple[int, int, int, int], size: int = 4) -> Tensor:
    """Max-pool the half-open cell region (x1, y1, x2, y2) of [m,h,w] into [m,size,size]."""
    if features.ndim != 3:
        raise ShapeError(f"roi_max_pool expects [m,h,w], got {features.shape}.")
    channels, height, width = features.shape
    x1, y1, x2, y2 = region
    if not (0 <= x1 < x2 <= width and 0 <= y1 < y2 <= height):
        raise ShapeError(f"roi_max_pool: region {region} outside a {height}x{width} map.")

    indices = np.empty((channels, size, size), dtype=np.int64)
    channel_offset = np.arange(channels) * height * width
    for by, (ys, ye) in enumerate(bin_edges(y1, y2, size)):
        for bx, (xs, xe) in enumerate(bin_edges(x1, x2, size)):
            window = features.data[:, ys:ye, xs:xe].reshape(channels, -1)
            local = window.argmax(axis=1)
            rows = ys + local // (xe - xs)
            cols = xs + local % (xe - xs)
            indices[:, by, bx] = channel_offset + rows * width + cols
    return gather_flat(features, indices)
