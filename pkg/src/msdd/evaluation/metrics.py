"""
Detection matching, precision, recall and the two AP variants.
"""
from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

import numpy as np

from msdd.model.proposals import iou
from msdd.training.deploy import Detection

Box = Sequence[float]


@dataclass
class MatchResult:
    tp: int
    fp: int
    fn: int
    # (score, is true positive) per prediction, in matching order
    outcomes: List[Tuple[float, bool]] = field(default_factory=list)

    def __add__(self, other: "MatchResult") -> "MatchResult":
        return MatchResult(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.outcomes + other.outcomes)


def match_detections(preds: Sequence[Detection], gts: Sequence[Box], iou_thr: float = 0.5) -> MatchResult:
    """Greedy matching of one image and one class.

    Predictions are visited by descending score (ties in input order); each
    takes the unmatched ground truth it overlaps most, and counts as a true
    positive when that overlap reaches ``iou_thr``.

    The true-positive count is the largest possible one-to-one matching only
    when no prediction reaches ``iou_thr`` with two ground truths. For
    ``iou_thr >= 0.5`` that holds whenever ground-truth boxes do not touch,
    which the corpus renderer guarantees by keeping instances ``MARGIN``
    pixels apart. On touching or overlapping ground truths the count can
    fall short of the optimum.
    """
    order = sorted(range(len(preds)), key=lambda i: -preds[i].score)
    matched = [False] * len(gts)
    outcomes = []
    for i in order:
        best, best_overlap = -1, 0.0
        for g, gt in enumerate(gts):
            if matched[g]:
                continue
            overlap = iou(preds[i].box, gt)
            if overlap > best_overlap:
                best, best_overlap = g, overlap
        hit = best >= 0 and best_overlap >= iou_thr
        if hit:
            matched[best] = True
        outcomes.append((preds[i].score, hit))
    tp = sum(hit for _, hit in outcomes)
    return MatchResult(tp=tp, fp=len(outcomes) - tp, fn=len(gts) - tp, outcomes=outcomes)


def precision(tp: int, fp: int) -> float:
    return tp / (tp + fp) if tp + fp else 0.0


def recall(tp: int, fn: int) -> float:
    return tp / (tp + fn) if tp + fn else 0.0


def ap_paper(precision_value: float, recall_value: float) -> float:
    """Mean of precision and recall."""
    for name, value in (("precision", precision_value), ("recall", recall_value)):
        if not 0.0 <= value <= 1.0:
            raise ValueError(f"{name} must lie in [0, 1], got {value}.")
    return (precision_value + recall_value) / 2


def ap_voc(outcomes: Sequence[Tuple[float, bool]], n_gt: int) -> float:
    """All-points interpolated area under the precision-recall curve.

    :param outcomes: (score, is true positive) of every prediction of one class, over all images
    :param n_gt: number of ground-truth boxes of the class
    """
    if n_gt == 0 or not outcomes:
        return 0.0
    order = sorted(range(len(outcomes)), key=lambda i: -outcomes[i][0])
    hits = np.asarray([outcomes[i][1] for i in order], dtype=np.float64)
    tp = np.cumsum(hits)
    fp = np.cumsum(1.0 - hits)
    rec = tp / n_gt
    prec = tp / np.maximum(tp + fp, np.finfo(np.float64).eps)

    mrec = np.concatenate(([0.0], rec, [1.0]))
    mpre = np.concatenate(([0.0], prec, [0.0]))
    for i in range(mpre.size - 1, 0, -1):
        mpre[i - 1] = max(mpre[i - 1], mpre[i])
    changes = np.where(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[changes + 1] - mrec[changes]) * mpre[changes + 1]))
