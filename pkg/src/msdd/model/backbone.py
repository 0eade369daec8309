"""
Feature extraction: a small convolutional hierarchy with top-down pyramid fusion.

For an H x W input the bottom-up maps C2, C3 and C4 sit at strides 2, 4 and 8.
Each is projected to m channels by a 1x1 lateral convolution; coarser
(pre-smoothing) maps are upsampled by 2, added to the next finer lateral and
the sums are smoothed by a 3x3 convolution. Detection runs on P3.
"""
from dataclasses import dataclass
from typing import Collection, List, Optional, Sequence

import numpy as np

from msdd.autodiff import Parameter, ShapeError, Tensor, add, relu, upsample2_nearest
from msdd.config_models import BackboneConfig
from msdd.model.layers import Conv2d

LEVELS = ("p2", "p3", "p4")


@dataclass
class PyramidFeatures:
    c2: Tensor
    c3: Tensor
    c4: Tensor

    def levels(self) -> List[Tensor]:
        return [self.c2, self.c3, self.c4]


@dataclass
class FusedFeature:
    """m-channel fused maps; levels that were not requested are None."""

    p2: Optional[Tensor]
    p3: Optional[Tensor]
    p4: Optional[Tensor]


def image_tensor(pixels: np.ndarray, dtype=np.float32) -> Tensor:
    """8-bit grayscale pixels -> [1, H, W] tensor in [0, 1]."""
    if pixels.ndim != 2:
        raise ShapeError(f"Expected a 2-D grayscale image, got shape {pixels.shape}.")
    return Tensor((pixels.astype(dtype) / dtype(255.0))[None], dtype=dtype)


class FeatureExtractor:
    """Backbone plus pyramid: every parameter frozen during fine-tuning."""

    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator, feature_fusion: bool = True):
        self.cfg = cfg
        self.feature_fusion = feature_fusion
        m = cfg.fpn_channels

        self.stem = Conv2d("backbone.stem", 1, cfg.stem_channels, 3, rng, pad=1)
        self.stages = []
        previous = cfg.stem_channels
        for level, channels in zip((2, 3, 4), cfg.stage_channels):
            down = Conv2d(f"backbone.stage{level}.down", previous, channels, 3, rng, stride=2, pad=1)
            conv = Conv2d(f"backbone.stage{level}.conv", channels, channels, 3, rng, pad=1)
            self.stages.append((down, conv))
            previous = channels

        self.laterals = [
            Conv2d(f"fpn.lateral{level}", channels, m, 1, rng) for level, channels in zip((2, 3, 4), cfg.stage_channels)
        ]
        self.smooth = [Conv2d(f"fpn.smooth{level}", m, m, 3, rng, pad=1) for level in (2, 3, 4)]

    def parameters(self) -> List[Parameter]:
        params = self.stem.parameters()
        for down, conv in self.stages:
            params += down.parameters() + conv.parameters()
        for layer in self.laterals + self.smooth:
            params += layer.parameters()
        return params

    # -------------------------------------------------------------------------

    def extract_pyramid(self, x: Tensor) -> PyramidFeatures:
        """Bottom-up pass over a [1, H, W] image with H and W divisible by 8."""
        if x.ndim != 3 or x.shape[0] != 1:
            raise ShapeError(f"Expected a [1, H, W] image, got {x.shape}.")
        if x.shape[1] % 8 or x.shape[2] % 8:
            raise ShapeError(f"Image extents must be divisible by 8, got {x.shape[1]}x{x.shape[2]}.")
        h = relu(self.stem(x))
        maps = []
        for down, conv in self.stages:
            h = relu(conv(relu(down(h))))
            maps.append(h)
        return PyramidFeatures(*maps)

    def lateral_project(self, level: int, c: Tensor) -> Tensor:
        """1x1 projection of bottom-up level ``level`` (2, 3 or 4) to m channels."""
        return self.laterals[level - 2](c)

    def fuse_topdown(self, laterals: Sequence[Tensor], levels: Collection[str] = LEVELS) -> FusedFeature:
        """Merge [L2, L3, L4] top-down and smooth the requested levels."""
        if len(laterals) != 3:
            raise ShapeError(f"Expected three lateral maps, got {len(laterals)}.")
        l2, l3, l4 = laterals
        for fine, coarse in ((l2, l3), (l3, l4)):
            if fine.shape != (coarse.shape[0], 2 * coarse.shape[1], 2 * coarse.shape[2]):
                raise ShapeError(f"Lateral maps {fine.shape} and {coarse.shape} do not form a x2 chain.")

        merged3 = add(l3, upsample2_nearest(l4))
        p4 = self.smooth[2](l4) if "p4" in levels else None
        p3 = self.smooth[1](merged3) if "p3" in levels else None
        p2 = self.smooth[0](add(l2, upsample2_nearest(merged3))) if "p2" in levels else None
        return FusedFeature(p2, p3, p4)

    def fuse(self, pyramid: PyramidFeatures) -> FusedFeature:
        laterals = [self.lateral_project(level, c) for level, c in zip((2, 3, 4), pyramid.levels())]
        return self.fuse_topdown(laterals)

    def feature(self, x: Tensor) -> Tensor:
        """Working feature F of an image, computing only what P3 depends on."""
        pyramid = self.extract_pyramid(x)
        l3 = self.lateral_project(3, pyramid.c3)
        if not self.feature_fusion:
            return self.smooth[1](l3)
        l4 = self.lateral_project(4, pyramid.c4)
        return self.smooth[1](add(l3, upsample2_nearest(l4)))


def working_feature(fused: FusedFeature) -> Tensor:
    if fused.p3 is None:
        raise ValueError("The fused feature was built without its P3 level.")
    return fused.p3
