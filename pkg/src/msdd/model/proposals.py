"""
Region proposals over the working feature, ROI pooling and the localization loss.

Boxes are (x1, y1, x2, y2) in image pixels, half-open. Anchors are square,
one per (cell, side) with flat index (y * w + x) * n_sides + side_index.
"""
import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from msdd.autodiff import (
    Parameter,
    ShapeError,
    Tensor,
    add,
    binary_cross_entropy,
    mean,
    relu,
    reshape,
    roi_max_pool,
    sigmoid,
    smooth_l1,
    sub,
    take,
    transpose,
)
from msdd.config_models import ProposalConfig
from msdd.model.layers import Conv2d
from msdd.model.reweight import ClassFeature

Box = Tuple[float, float, float, float]
# Largest log-scale change applied when decoding
DELTA_CLAMP = math.log(1000.0 / 16.0)

# -----------------------------------------------------------------------------
# Geometry
# -----------------------------------------------------------------------------


def iou(a: Sequence[float], b: Sequence[float]) -> float:
    for box in (a, b):
        if not (box[0] < box[2] and box[1] < box[3]):
            raise ValueError(f"Degenerate box {tuple(box)}.")
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return float(inter / union)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU of [n, 4] and [k, 4] box arrays."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1), 0.0)


@dataclass
class AnchorSet:
    boxes: np.ndarray  # [h * w * n_sides, 4], unclipped
    grid: Tuple[int, int]
    sides: Tuple[int, ...]
    stride: int

    def __len__(self) -> int:
        return len(self.boxes)

    def position(self, index: int) -> Tuple[int, int, int]:
        """(y, x, side index) of anchor ``index``."""
        cell, side = divmod(index, len(self.sides))
        y, x = divmod(cell, self.grid[1])
        return y, x, side


def generate_anchors(grid: Tuple[int, int], stride: int = 4, sides: Sequence[int] = (16, 32, 64)) -> AnchorSet:
    h, w = grid
    ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    centers_x = (xs * stride + stride / 2).reshape(-1, 1)
    centers_y = (ys * stride + stride / 2).reshape(-1, 1)
    half = np.asarray(sides, dtype=np.float64)[None, :] / 2
    boxes = np.stack(
        [centers_x - half, centers_y - half, centers_x + half, centers_y + half],
        axis=-1,
    ).reshape(-1, 4)
    return AnchorSet(boxes, (h, w), tuple(sides), stride)


def clip_boxes(boxes: np.ndarray, image_size: Tuple[int, int]) -> np.ndarray:
    height, width = image_size
    clipped = np.array(boxes, dtype=np.float64)
    clipped[:, [0, 2]] = np.clip(clipped[:, [0, 2]], 0, width)
    clipped[:, [1, 3]] = np.clip(clipped[:, [1, 3]], 0, height)
    return clipped


def encode_deltas(anchors: np.ndarray, boxes: np.ndarray) -> np.ndarray:
    """(dx, dy) relative to anchor size, (dw, dh) in log space."""
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    ax = anchors[:, 0] + aw / 2
    ay = anchors[:, 1] + ah / 2
    bw = boxes[:, 2] - boxes[:, 0]
    bh = boxes[:, 3] - boxes[:, 1]
    bx = boxes[:, 0] + bw / 2
    by = boxes[:, 1] + bh / 2
    return np.stack([(bx - ax) / aw, (by - ay) / ah, np.log(bw / aw), np.log(bh / ah)], axis=1)


def decode_deltas(anchors: np.ndarray, deltas: np.ndarray) -> np.ndarray:
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    ax = anchors[:, 0] + aw / 2
    ay = anchors[:, 1] + ah / 2
    deltas = np.asarray(deltas, dtype=np.float64)
    cx = ax + deltas[:, 0] * aw
    cy = ay + deltas[:, 1] * ah
    w = aw * np.exp(np.minimum(deltas[:, 2], DELTA_CLAMP))
    h = ah * np.exp(np.minimum(deltas[:, 3], DELTA_CLAMP))
    return np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=1)


# -----------------------------------------------------------------------------
# Proposal head
# -----------------------------------------------------------------------------


class RPNHead:
    """3x3 conv + relu, then 1x1 objectness and 1x1 box-delta heads."""

    def __init__(self, channels: int, n_sides: int, rng: np.random.Generator):
        self.conv = Conv2d("rpn.conv", channels, channels, 3, rng, pad=1)
        self.objectness = Conv2d("rpn.objectness", channels, n_sides, 1, rng)
        self.deltas = Conv2d("rpn.deltas", channels, 4 * n_sides, 1, rng)
        for head in (self.objectness, self.deltas):
            head.weight.data[...] = rng.normal(0.0, 0.01, size=head.weight.shape)
        self.n_sides = n_sides

    def parameters(self) -> List[Parameter]:
        return self.conv.parameters() + self.objectness.parameters() + self.deltas.parameters()


def rpn_forward(head: RPNHead, features: Tensor) -> Tuple[Tensor, Tensor]:
    """:return: objectness [n_sides, h, w] in (0, 1) and raw deltas [4 * n_sides, h, w]"""
    hidden = relu(head.conv(features))
    return sigmoid(head.objectness(hidden)), head.deltas(hidden)


def flatten_rpn(objectness: Tensor, deltas: Tensor) -> Tuple[Tensor, Tensor]:
    """Reorder head outputs to anchor order: [A] and [A, 4]."""
    n_sides, h, w = objectness.shape
    if deltas.shape != (4 * n_sides, h, w):
        raise ShapeError(f"Delta map {deltas.shape} does not match objectness {objectness.shape}.")
    flat_obj = reshape(transpose(objectness, (1, 2, 0)), (-1,))
    flat_deltas = reshape(transpose(reshape(deltas, (n_sides, 4, h, w)), (2, 3, 0, 1)), (-1, 4))
    return flat_obj, flat_deltas


@dataclass
class Proposal:
    box: Box
    score: float
    anchor_index: int


def nms(boxes: np.ndarray, scores: np.ndarray, threshold: float) -> List[int]:
    """Greedy suppression; ``boxes`` must already be sorted by priority."""
    x1, y1, x2, y2 = boxes[:, 0], boxes[:, 1], boxes[:, 2], boxes[:, 3]
    areas = (x2 - x1) * (y2 - y1)
    order = np.arange(len(boxes))
    keep = []
    while order.size > 0:
        i = order[0]
        keep.append(int(i))
        xx1 = np.maximum(x1[i], x1[order[1:]])
        yy1 = np.maximum(y1[i], y1[order[1:]])
        xx2 = np.minimum(x2[i], x2[order[1:]])
        yy2 = np.minimum(y2[i], y2[order[1:]])
        inter = np.maximum(0.0, xx2 - xx1) * np.maximum(0.0, yy2 - yy1)
        ovr = inter / (areas[i] + areas[order[1:]] - inter)
        order = order[1:][ovr <= threshold]
    return keep


def decode_and_nms(
    anchors: AnchorSet,
    objectness: np.ndarray,
    deltas: np.ndarray,
    image_size: Tuple[int, int],
    cfg: ProposalConfig,
) -> List[Proposal]:
    """Decode, clip, threshold, keep the top ``pre_nms_top``, suppress, keep the top ``post_nms_top``.

    Equal scores are ordered by anchor index.
    """
    objectness = np.asarray(objectness, dtype=np.float64).reshape(-1)
    deltas = np.asarray(deltas, dtype=np.float64).reshape(-1, 4)
    if len(objectness) != len(anchors) or len(deltas) != len(anchors):
        raise ShapeError(f"{len(anchors)} anchors, {len(objectness)} scores and {len(deltas)} deltas.")

    boxes = clip_boxes(decode_deltas(anchors.boxes, deltas), image_size)
    valid = (boxes[:, 2] - boxes[:, 0] >= 1) & (boxes[:, 3] - boxes[:, 1] >= 1) & (objectness >= cfg.score_min)
    candidates = np.flatnonzero(valid)
    order = candidates[np.lexsort((candidates, -objectness[candidates]))][: cfg.pre_nms_top]
    kept = nms(boxes[order], objectness[order], cfg.nms_iou)[: cfg.post_nms_top]
    return [
        Proposal(tuple(float(v) for v in boxes[order[k]]), float(objectness[order[k]]), int(order[k]))  # type: ignore
        for k in kept
    ]


# -----------------------------------------------------------------------------
# ROI pooling
# -----------------------------------------------------------------------------


@dataclass
class ROIFeature:
    pooled: Tensor
    box: Box
    # None when pooled from the un-reweighted feature
    class_id: Optional[int]


def box_to_cells(box: Sequence[float], stride: int, grid: Tuple[int, int]) -> Tuple[int, int, int, int]:
    """Map a pixel box outward onto feature cells, snapping to at least one cell."""
    h, w = grid
    x1 = min(max(math.floor(box[0] / stride), 0), w - 1)
    y1 = min(max(math.floor(box[1] / stride), 0), h - 1)
    x2 = min(max(math.ceil(box[2] / stride), x1 + 1), w)
    y2 = min(max(math.ceil(box[3] / stride), y1 + 1), h)
    return x1, y1, x2, y2


def roi_pool(feature: ClassFeature | Tensor, box: Sequence[float], stride: int = 4, size: int = 4) -> ROIFeature:
    if isinstance(feature, ClassFeature):
        features, class_id = feature.features, feature.class_id
    else:
        features, class_id = feature, None
    region = box_to_cells(box, stride, (features.shape[1], features.shape[2]))
    return ROIFeature(roi_max_pool(features, region, size), tuple(box), class_id)  # type: ignore


# -----------------------------------------------------------------------------
# Localization targets and loss
# -----------------------------------------------------------------------------

POSITIVE, NEGATIVE, IGNORE = 1, 0, -1


@dataclass
class LocTargets:
    labels: np.ndarray  # [A] in {1, 0, -1}
    targets: np.ndarray  # [A, 4] regression targets, meaningful for positives
    sampled: np.ndarray  # sorted anchor indices entering the loss

    @property
    def positives(self) -> np.ndarray:
        return self.sampled[self.labels[self.sampled] == POSITIVE]


def label_anchors(anchors: np.ndarray, gt_boxes: np.ndarray, cfg: ProposalConfig) -> Tuple[np.ndarray, np.ndarray]:
    """:return: per-anchor labels and the index of each anchor's best ground truth"""
    labels = np.full(len(anchors), IGNORE, dtype=np.int8)
    if len(gt_boxes) == 0:
        labels[:] = NEGATIVE
        return labels, np.zeros(len(anchors), dtype=np.int64)
    overlaps = iou_matrix(anchors, gt_boxes)
    best_gt = overlaps.argmax(axis=1)
    best = overlaps.max(axis=1)
    labels[best < cfg.neg_iou] = NEGATIVE
    labels[best >= cfg.pos_iou] = POSITIVE
    if cfg.low_quality_matches:
        per_gt = overlaps.max(axis=0)
        for g in np.flatnonzero(per_gt > 0):
            winners = np.flatnonzero(overlaps[:, g] == per_gt[g])
            labels[winners] = POSITIVE
            best_gt[winners] = g
    return labels, best_gt


def build_loc_targets(
    anchors: AnchorSet, gt_boxes: Sequence[Sequence[float]], cfg: ProposalConfig, rng: np.random.Generator
) -> LocTargets:
    """Label anchors and sample up to ``anchors_per_image`` of them, at most half positive."""
    gt = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    labels, best_gt = label_anchors(anchors.boxes, gt, cfg)
    targets = np.zeros((len(anchors), 4), dtype=np.float64)
    positives = np.flatnonzero(labels == POSITIVE)
    if len(positives):
        targets[positives] = encode_deltas(anchors.boxes[positives], gt[best_gt[positives]])

    negatives = np.flatnonzero(labels == NEGATIVE)
    n_pos = min(len(positives), cfg.anchors_per_image // 2)
    n_neg = min(len(negatives), cfg.anchors_per_image - n_pos)
    chosen_pos = rng.permutation(positives)[:n_pos]
    chosen_neg = rng.permutation(negatives)[:n_neg]
    sampled = np.sort(np.concatenate([chosen_pos, chosen_neg]).astype(np.int64))
    return LocTargets(labels, targets, sampled)


def loc_loss(objectness: Tensor, deltas: Tensor, targets: LocTargets) -> Tensor:
    """Mean BCE over sampled anchors plus mean smooth-L1 over positive deltas.

    :param objectness: [A] probabilities in anchor order
    :param deltas: [A, 4] predicted deltas in anchor order
    """
    if len(targets.sampled) == 0:
        raise ValueError("No anchor was sampled for the localization loss.")
    labels = (targets.labels[targets.sampled] == POSITIVE).astype(np.float64)
    loss = mean(binary_cross_entropy(take(objectness, targets.sampled), labels))
    positives = targets.positives
    if len(positives):
        expected = Tensor(targets.targets[positives], dtype=deltas.dtype)
        loss = add(loss, mean(smooth_l1(sub(take(deltas, positives), expected))))
    return loss


def negative_anchor_boxes(
    anchors: AnchorSet,
    gt_boxes: Sequence[Sequence[float]],
    image_size: Tuple[int, int],
    count: int,
    neg_iou: float,
    rng: np.random.Generator,
) -> List[Box]:
    """``count`` clipped anchors overlapping every ground truth below ``neg_iou``, chosen by seeded shuffle."""
    if count <= 0:
        return []
    clipped = clip_boxes(anchors.boxes, image_size)
    gt = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    best = iou_matrix(clipped, gt).max(axis=1) if len(gt) else np.zeros(len(clipped))
    sized = (clipped[:, 2] - clipped[:, 0] >= 1) & (clipped[:, 3] - clipped[:, 1] >= 1)
    eligible = np.flatnonzero((best < neg_iou) & sized)
    chosen = rng.permutation(eligible)[:count]
    return [tuple(float(v) for v in clipped[i]) for i in chosen]  # type: ignore
