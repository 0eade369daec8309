"""
Distance-metric classification.

Each class is represented by a prototype, the mean embedding of its support
ROIs. A query ROI is embedded once per class (pooled from that class'
reweighted feature) and scored by the negative squared Euclidean distance to
the class prototype; a background prototype competes like any class.
"""
from dataclasses import dataclass
from typing import Dict, List, Mapping, Sequence

import numpy as np

from msdd.autodiff import (
    NonFiniteError,
    ShapeError,
    Tensor,
    add,
    clamp,
    log,
    log_softmax,
    reshape,
    scale,
    softmax,
    square,
    stack,
    sub,
    take,
)
from msdd.autodiff.ops import sum as tensor_sum
from msdd.model.proposals import ROIFeature

BACKGROUND = -1
PROB_FLOOR = 1e-12


def embed(roi: ROIFeature | Tensor) -> Tensor:
    """Channel-major flattening of an [m, s, s] pooled ROI."""
    pooled = roi.pooled if isinstance(roi, ROIFeature) else roi
    if pooled.ndim != 3 or pooled.shape[1] != pooled.shape[2]:
        raise ShapeError(f"Expected a pooled ROI [m, s, s], got {pooled.shape}.")
    return reshape(pooled, (-1,))


def sq_euclid(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape or a.ndim != 1:
        raise ShapeError(f"Embedding shapes differ: {a.shape} vs {b.shape}.")
    return tensor_sum(square(sub(a, b)))


@dataclass
class Prototype:
    c: Tensor
    class_id: int
    support_count: int


def compute_prototype(embeddings: Sequence[Tensor], class_id: int) -> Prototype:
    """Arithmetic mean, summed in the given order."""
    if not embeddings:
        raise ValueError(f"Class {class_id} has no embedding to build a prototype from.")
    total = embeddings[0]
    for e in embeddings[1:]:
        total = add(total, e)
    return Prototype(scale(total, 1.0 / len(embeddings)), class_id, len(embeddings))


def background_prototype(negative_embeddings: Sequence[Tensor]) -> Prototype:
    return compute_prototype(negative_embeddings, BACKGROUND)


class PrototypeBank:
    """One prototype per defect class plus at most one background prototype.

    Iteration order is ascending class id, background last.
    """

    def __init__(self, prototypes: Sequence[Prototype] = ()):
        self._prototypes: Dict[int, Prototype] = {}
        for prototype in prototypes:
            self.add(prototype)

    def add(self, prototype: Prototype) -> None:
        if prototype.class_id in self._prototypes:
            raise ValueError(f"Class {prototype.class_id} already has a prototype.")
        if self._prototypes:
            expected = next(iter(self._prototypes.values())).c.shape
            if prototype.c.shape != expected:
                raise ShapeError(f"Prototype shape {prototype.c.shape} differs from the bank's {expected}.")
        self._prototypes[prototype.class_id] = prototype

    @property
    def class_ids(self) -> List[int]:
        classes = sorted(c for c in self._prototypes if c != BACKGROUND)
        return classes + ([BACKGROUND] if BACKGROUND in self._prototypes else [])

    @property
    def has_background(self) -> bool:
        return BACKGROUND in self._prototypes

    def __getitem__(self, class_id: int) -> Prototype:
        return self._prototypes[class_id]

    def __contains__(self, class_id: int) -> bool:
        return class_id in self._prototypes

    def __len__(self) -> int:
        return len(self._prototypes)

    def detached(self) -> "PrototypeBank":
        return PrototypeBank([Prototype(p.c.detach(), p.class_id, p.support_count) for p in self.prototypes()])

    def prototypes(self) -> List[Prototype]:
        return [self._prototypes[c] for c in self.class_ids]


@dataclass
class ClassProbs:
    class_ids: List[int]
    logits: Tensor
    probs: Tensor

    def index(self, class_id: int) -> int:
        try:
            return self.class_ids.index(class_id)
        except ValueError:
            raise ValueError(f"Class {class_id} is not among {self.class_ids}.") from None

    def prob(self, class_id: int) -> float:
        return float(self.probs.data[self.index(class_id)])

    def argmax(self) -> int:
        return self.class_ids[int(np.argmax(self.logits.data))]


def classify(embeddings: Mapping[int, Tensor], bank: PrototypeBank) -> ClassProbs:
    """Softmax over negative squared distances, one class-matched embedding per bank entry."""
    class_ids = bank.class_ids
    if not class_ids:
        raise ValueError("The prototype bank is empty.")
    missing = [c for c in class_ids if c not in embeddings]
    if missing:
        raise ValueError(f"Missing class-matched embeddings for classes {missing}.")
    logits = stack([scale(sq_euclid(embeddings[c], bank[c].c), -1.0) for c in class_ids])
    return ClassProbs(class_ids, logits, softmax(logits))


def cla_loss(probs: ClassProbs, true_class: int) -> Tensor:
    """-log P(true class), the probability floored at 1e-12."""
    index = probs.index(true_class)
    p = clamp(take(probs.probs, np.array([index])), PROB_FLOOR, 1.0)
    return scale(reshape(log(p), ()), -1.0)


def cla_loss_from_logits(probs: ClassProbs, true_class: int) -> Tensor:
    """Same loss through log-softmax, keeping a gradient when P(true class) underflows."""
    index = probs.index(true_class)
    return scale(reshape(take(log_softmax(probs.logits), np.array([index])), ()), -1.0)


def total_loss(l_loc: Tensor, l_cla: Tensor) -> Tensor:
    for name, term in (("L_loc", l_loc), ("L_cla", l_cla)):
        if term.data.size != 1:
            raise ShapeError(f"{name} must be a scalar, got shape {term.shape}.")
        value = term.item()
        if not np.isfinite(value):
            raise NonFiniteError(f"{name} is not finite.")
        if value < 0:
            raise ValueError(f"{name} must be nonnegative, got {value}.")
    return add(reshape(l_loc, ()), reshape(l_cla, ()))
