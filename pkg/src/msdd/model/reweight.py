"""
Per-class feature reweighting.

A support example (image plus a binary mask of its annotated boxes) is
embedded by a small CNN into an m-vector that rescales the channels of the
working feature.
"""
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from msdd.autodiff import Parameter, ShapeError, Tensor, add, channel_scale, global_max_pool, relu, scale
from msdd.model.layers import Conv2d, Linear

Box = Tuple[int, int, int, int]


@dataclass
class ReweightingVector:
    w: Tensor
    class_id: int


@dataclass
class ClassFeature:
    features: Tensor
    # None for the un-reweighted feature
    class_id: int | None


def reweight_input(pixels: np.ndarray, boxes: Sequence[Box], dtype=np.float32) -> Tensor:
    """Stack normalized pixels and the union mask of ``boxes`` into [2, H, W]."""
    if not boxes:
        raise ValueError("A support example needs at least one annotation.")
    mask = np.zeros(pixels.shape, dtype=dtype)
    for x1, y1, x2, y2 in boxes:
        mask[y1:y2, x1:x2] = 1
    return Tensor(np.stack([pixels.astype(dtype) / dtype(255.0), mask]), dtype=dtype)


class ReweightNet:
    """Three stride-2 convolutions, global max pooling and a linear map to m.

    The final layer starts with near-zero weights and unit bias, so a fresh
    network returns approximately the all-ones vector.
    """

    def __init__(self, out_features: int, rng: np.random.Generator, channels: Tuple[int, int, int] = (8, 16, 32)):
        self.convs = []
        previous = 2
        for index, width in enumerate(channels):
            self.convs.append(Conv2d(f"reweight.conv{index}", previous, width, 3, rng, stride=2, pad=1))
            previous = width
        self.head = Linear("reweight.head", previous, out_features, rng, weight_std=1e-3, bias_value=1.0)
        self.out_features = out_features

    def parameters(self) -> List[Parameter]:
        params = []
        for conv in self.convs:
            params += conv.parameters()
        return params + self.head.parameters()

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim != 3 or x.shape[0] != 2:
            raise ShapeError(f"Expected a [2, H, W] support input, got {x.shape}.")
        h = x
        for conv in self.convs:
            h = relu(conv(h))
        return self.head(global_max_pool(h))


def encode_support(net: ReweightNet, pixels: np.ndarray, boxes: Sequence[Box], class_id: int) -> ReweightingVector:
    x = reweight_input(pixels, boxes, dtype=net.head.weight.dtype.type)
    return ReweightingVector(net(x), class_id)


def class_reweighting_vector(
    net: ReweightNet, support: Sequence[Tuple[np.ndarray, Sequence[Box]]], class_id: int
) -> ReweightingVector:
    """Mean of the support vectors of one class, summed in the given order."""
    if not support:
        raise ValueError(f"Class {class_id} has no support example.")
    total = None
    for pixels, boxes in support:
        w = encode_support(net, pixels, boxes, class_id).w
        total = w if total is None else add(total, w)
    return ReweightingVector(scale(total, 1.0 / len(support)), class_id)


def identity_vector(m: int, class_id: int, dtype=np.float32) -> ReweightingVector:
    """All-ones vector, used when reweighting is switched off."""
    return ReweightingVector(Tensor(np.ones(m, dtype=dtype), dtype=dtype), class_id)


def apply_reweighting(features: Tensor, vector: ReweightingVector) -> ClassFeature:
    """F_i[c] = F[c] * w_i[c]."""
    return ClassFeature(channel_scale(features, vector.w), vector.class_id)
