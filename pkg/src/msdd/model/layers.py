"""
Parameterized layers.
"""
import math
from typing import List

import numpy as np

from msdd.autodiff import Parameter, Tensor, conv2d, linear


class Conv2d:
    """Square-kernel convolution with He-normal weights and zero bias."""

    def __init__(
        self,
        name: str,
        in_channels: int,
        out_channels: int,
        kernel: int,
        rng: np.random.Generator,
        stride: int = 1,
        pad: int = 0,
    ):
        fan_in = in_channels * kernel * kernel
        weight = rng.normal(0.0, math.sqrt(2.0 / fan_in), size=(out_channels, in_channels, kernel, kernel))
        self.weight = Parameter(f"{name}.weight", weight.astype(np.float32))
        self.bias = Parameter(f"{name}.bias", np.zeros(out_channels, dtype=np.float32))
        self.stride = stride
        self.pad = pad

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, stride=self.stride, pad=self.pad)

    def parameters(self) -> List[Parameter]:
        return [self.weight, self.bias]


class Linear:
    def __init__(
        self,
        name: str,
        in_features: int,
        out_features: int,
        rng: np.random.Generator,
        weight_std: float | None = None,
        bias_value: float = 0.0,
    ):
        std = math.sqrt(2.0 / in_features) if weight_std is None else weight_std
        weight = rng.normal(0.0, std, size=(out_features, in_features))
        self.weight = Parameter(f"{name}.weight", weight.astype(np.float32))
        self.bias = Parameter(f"{name}.bias", np.full(out_features, bias_value, dtype=np.float32))

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)

    def parameters(self) -> List[Parameter]:
        return [self.weight, self.bias]
