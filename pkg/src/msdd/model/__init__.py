"""
The detector: feature extractor, reweighting net, proposal head and the
parameter-free metric head.
"""
import hashlib
from typing import Dict, List, Mapping, Sequence, Tuple

import numpy as np

from msdd.autodiff import Parameter, ShapeError, Tensor
from msdd.config_models import ModelConfig
from msdd.model.backbone import FeatureExtractor, image_tensor
from msdd.model.metric_head import BACKGROUND, embed
from msdd.model.proposals import (
    AnchorSet,
    Proposal,
    RPNHead,
    decode_and_nms,
    flatten_rpn,
    generate_anchors,
    roi_pool,
    rpn_forward,
)
from msdd.model.reweight import (
    ClassFeature,
    ReweightingVector,
    ReweightNet,
    apply_reweighting,
    class_reweighting_vector,
    identity_vector,
)

Box = Tuple[float, float, float, float]


class MSDDModel:
    """Container of every learnable parameter, addressed by unique names."""

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.init_seed)
        m = cfg.backbone.fpn_channels
        self.extractor = FeatureExtractor(cfg.backbone, rng, feature_fusion=cfg.feature_fusion)
        self.reweight = ReweightNet(m, rng)
        self.rpn = RPNHead(m, len(cfg.proposals.anchor_sides), rng)
        self._anchors: Dict[Tuple[int, int], AnchorSet] = {}

        names = [p.name for p in self.parameters()]
        if len(set(names)) != len(names):
            raise ValueError("Parameter names must be unique.")
        if not cfg.reweighting:
            # Never evaluated, so never trained
            for p in self.reweight.parameters():
                p.frozen = True

    # -------------------------------------------------------------------------
    # Parameters
    # -------------------------------------------------------------------------

    def parameters(self) -> List[Parameter]:
        return self.extractor.parameters() + self.reweight.parameters() + self.rpn.parameters()

    def named_parameters(self) -> Dict[str, Parameter]:
        return {p.name: p for p in self.parameters()}

    def extractor_parameters(self) -> List[Parameter]:
        return self.extractor.parameters()

    def freeze_extractor(self, frozen: bool = True) -> None:
        for p in self.extractor_parameters():
            p.frozen = frozen

    @property
    def dtype(self) -> np.dtype:
        return self.extractor.stem.weight.dtype

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {p.name: p.data.copy() for p in self.parameters()}

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        """Strictly replace every parameter: names, shapes and dtypes must match."""
        params = self.named_parameters()
        if set(state) != set(params):
            missing = sorted(set(params) - set(state))
            unexpected = sorted(set(state) - set(params))
            raise ValueError(f"State does not match the model: missing {missing}, unexpected {unexpected}.")
        for name, p in params.items():
            value = np.asarray(state[name])
            if value.shape != p.shape:
                raise ShapeError(f"Parameter {name} has shape {p.shape}, state has {value.shape}.")
            if value.dtype != p.dtype:
                raise TypeError(f"Parameter {name} has dtype {p.dtype}, state has {value.dtype}.")
        for name, p in params.items():
            p.data = np.array(state[name], dtype=p.dtype)
            p.grad = None

    def astype(self, dtype) -> "MSDDModel":
        """Copy of the model with every parameter cast to ``dtype``."""
        copy = MSDDModel(self.cfg)
        for source, target in zip(self.parameters(), copy.parameters()):
            target.data = source.data.astype(dtype)
            target.frozen = source.frozen
        return copy

    def fingerprint(self) -> str:
        digest = hashlib.sha256()
        for p in self.parameters():
            digest.update(p.name.encode("utf-8"))
            digest.update(np.ascontiguousarray(p.data).astype(p.dtype.newbyteorder("<")).tobytes())
        return digest.hexdigest()

    # -------------------------------------------------------------------------
    # Forward pieces
    # -------------------------------------------------------------------------

    def anchors(self, grid: Tuple[int, int]) -> AnchorSet:
        if grid not in self._anchors:
            proposals = self.cfg.proposals
            self._anchors[grid] = generate_anchors(grid, proposals.stride, proposals.anchor_sides)
        return self._anchors[grid]

    def feature(self, pixels: np.ndarray) -> Tensor:
        return self.extractor.feature(image_tensor(pixels, dtype=self.dtype.type))

    def rpn_outputs(self, features: Tensor) -> Tuple[Tensor, Tensor]:
        """Objectness [A] and deltas [A, 4] in anchor order."""
        objectness, deltas = rpn_forward(self.rpn, features)
        return flatten_rpn(objectness, deltas)

    def propose(
        self, features: Tensor, objectness: Tensor, deltas: Tensor, image_size: Tuple[int, int]
    ) -> List[Proposal]:
        anchors = self.anchors((features.shape[1], features.shape[2]))
        return decode_and_nms(anchors, objectness.data, deltas.data, image_size, self.cfg.proposals)

    def reweighting_vector(self, support: Sequence[Tuple[np.ndarray, Sequence]], class_id: int) -> ReweightingVector:
        if not self.cfg.reweighting:
            if not support:
                raise ValueError(f"Class {class_id} has no support example.")
            return identity_vector(self.cfg.backbone.fpn_channels, class_id, dtype=self.dtype.type)
        return class_reweighting_vector(self.reweight, support, class_id)


def class_features(features: Tensor, vectors: Mapping[int, ReweightingVector]) -> Dict[int, ClassFeature]:
    """One reweighted feature per class, plus the plain feature under the background id."""
    result = {class_id: apply_reweighting(features, vector) for class_id, vector in sorted(vectors.items())}
    result[BACKGROUND] = ClassFeature(features, None)
    return result


def pooled_embeddings(feats: Mapping[int, ClassFeature], box: Box, stride: int, size: int) -> Dict[int, Tensor]:
    """Class-matched embeddings of one box."""
    return {class_id: embed(roi_pool(feature, box, stride, size)) for class_id, feature in feats.items()}


__all__ = [
    "BACKGROUND",
    "MSDDModel",
    "class_features",
    "pooled_embeddings",
]
