"""
Episodic tasks and the per-episode loss.

An episode samples ``s`` support and ``q`` query images per class. Support
images give each class its reweighting vector and prototype; the loss is
computed on the query images and averaged over them.
"""
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Set, Tuple

import numpy as np

from msdd.autodiff import (
    OptimState,
    Tape,
    Tensor,
    backward,
    clip_grad_norm,
    mean,
    no_grad,
    sgd_step,
    stack,
    zero_grad,
)
from msdd.config_models import PhaseConfig
from msdd.corpus_models import DefectImage
from msdd.model import MSDDModel, class_features, pooled_embeddings
from msdd.model.metric_head import (
    BACKGROUND,
    PrototypeBank,
    background_prototype,
    cla_loss_from_logits,
    classify,
    compute_prototype,
    embed,
    total_loss,
)
from msdd.model.proposals import (
    AnchorSet,
    build_loc_targets,
    iou_matrix,
    loc_loss,
    negative_anchor_boxes,
    roi_pool,
)
from msdd.model.reweight import ReweightingVector, apply_reweighting
from msdd.utils import one_line

Pools = Dict[int, List[DefectImage]]
# Background ROIs drawn from every support image
NEGATIVES_PER_SUPPORT = 2
# Fewest ROIs entering the classification loss of a query image
MIN_ROIS = 4


class EpisodeError(RuntimeError):
    """A numeric or shape failure inside an episode."""

    def __init__(self, episode: int, cause: BaseException):
        super().__init__(f"Episode {episode} failed: {one_line(cause)}")
        self.episode = episode


# -----------------------------------------------------------------------------
# Tasks
# -----------------------------------------------------------------------------


@dataclass
class Task:
    class_ids: List[int]
    support: Dict[int, List[DefectImage]]
    query: List[DefectImage]

    @property
    def image_ids(self) -> Set[str]:
        return {image.id for images in self.support.values() for image in images} | {i.id for i in self.query}


def _draw(pool: Sequence[DefectImage], count: int, class_id: int, rng: np.random.Generator) -> List[DefectImage]:
    if len(pool) < count:
        raise ValueError(f"Class {class_id} has {len(pool)} training images, an episode needs {count}.")
    ordered = sorted(pool, key=lambda image: image.id)
    return [ordered[i] for i in rng.choice(len(ordered), size=count, replace=False)]


def sample_task(pools: Pools, class_set: Sequence[int], s: int, q: int, rng: np.random.Generator) -> Task:
    """Draw ``s`` support and ``q`` query images per class, uniformly and without replacement.

    :raises ValueError: naming the first class holding fewer than ``s + q`` images
    """
    class_ids = sorted(class_set)
    support: Dict[int, List[DefectImage]] = {}
    query: List[DefectImage] = []
    for class_id in class_ids:
        drawn = _draw(pools.get(class_id, []), s + q, class_id, rng)
        support[class_id] = drawn[:s]
        query += drawn[s:]
    return Task(class_ids, support, query)


def sample_joint_task(pools: Pools, class_set: Sequence[int], s: int, q: int, rng: np.random.Generator) -> Task:
    """Balanced support, but a query of ``N * q`` images drawn from the remaining images of all classes mixed.

    Classes enter the query in proportion to their share of the training set.
    """
    class_ids = sorted(class_set)
    support: Dict[int, List[DefectImage]] = {}
    remaining: List[DefectImage] = []
    for class_id in class_ids:
        drawn = _draw(pools.get(class_id, []), s, class_id, rng)
        support[class_id] = drawn
        chosen = {image.id for image in drawn}
        remaining += sorted((i for i in pools[class_id] if i.id not in chosen), key=lambda image: image.id)
    count = len(class_ids) * q
    if len(remaining) < count:
        raise ValueError(f"Only {len(remaining)} images remain for a query of {count}.")
    query = [remaining[i] for i in rng.choice(len(remaining), size=count, replace=False)]
    return Task(class_ids, support, query)


# -----------------------------------------------------------------------------
# Prototypes
# -----------------------------------------------------------------------------


def reweighting_vectors(model: MSDDModel, support: Dict[int, List[DefectImage]]) -> Dict[int, ReweightingVector]:
    vectors = {}
    for class_id in sorted(support):
        images = sorted(support[class_id], key=lambda image: image.id)
        vectors[class_id] = model.reweighting_vector([(image.pixels, image.boxes) for image in images], class_id)
    return vectors


def support_negatives(
    model: MSDDModel, features: Tensor, image: DefectImage, count: int, rng: np.random.Generator
) -> List[Tuple[float, float, float, float]]:
    """Proposals overlapping no ground truth, padded with negative anchors."""
    neg_iou = model.cfg.proposals.neg_iou
    with no_grad():
        objectness, deltas = model.rpn_outputs(features)
        proposals = model.propose(features, objectness, deltas, image.pixels.shape)
    gt = np.asarray(image.boxes, dtype=np.float64)
    boxes = [p.box for p in proposals if iou_matrix(np.asarray([p.box]), gt).max() < neg_iou][:count]
    anchors = model.anchors((features.shape[1], features.shape[2]))
    return boxes + negative_anchor_boxes(anchors, image.boxes, image.pixels.shape, count - len(boxes), neg_iou, rng)


def build_bank(
    model: MSDDModel,
    support: Dict[int, List[DefectImage]],
    vectors: Dict[int, ReweightingVector],
    rng: np.random.Generator,
) -> PrototypeBank:
    """Class prototypes from support ground-truth boxes, plus a background prototype from support negatives.

    Support images are visited in id order within each class.
    """
    stride, size = model.cfg.proposals.stride, model.cfg.roi_size
    bank = PrototypeBank()
    negatives = []
    for class_id in sorted(support):
        embeddings = []
        for image in sorted(support[class_id], key=lambda image: image.id):
            features = model.feature(image.pixels)
            reweighted = apply_reweighting(features, vectors[class_id])
            embeddings += [embed(roi_pool(reweighted, box, stride, size)) for box in image.boxes]
            for box in support_negatives(model, features, image, NEGATIVES_PER_SUPPORT, rng):
                negatives.append(embed(roi_pool(features, box, stride, size)))
        bank.add(compute_prototype(embeddings, class_id))
    bank.add(background_prototype(negatives))
    return bank


# -----------------------------------------------------------------------------
# Loss
# -----------------------------------------------------------------------------


@dataclass
class EpisodeMetrics:
    episode: int
    loss: float
    loc_loss: float
    cla_loss: float


def query_rois(
    model: MSDDModel, image: DefectImage, proposals: Sequence, anchors: AnchorSet, rng: np.random.Generator
) -> List[Tuple[Tuple[float, float, float, float], int]]:
    """(box, label) pairs: every positive candidate plus as many negatives, at least ``MIN_ROIS`` in total.

    Candidates are the ground-truth boxes followed by the proposals.
    """
    cfg = model.cfg.proposals
    gt = np.asarray(image.boxes, dtype=np.float64)
    candidates = [tuple(float(v) for v in box) for box in image.boxes] + [p.box for p in proposals]
    best = iou_matrix(np.asarray(candidates), gt).max(axis=1)
    positives = [box for box, overlap in zip(candidates, best) if overlap >= cfg.pos_iou]
    negatives = [box for box, overlap in zip(candidates, best) if overlap < cfg.neg_iou]

    n_neg = max(len(positives), MIN_ROIS - len(positives))
    negatives = negatives[:n_neg]
    negatives += negative_anchor_boxes(
        anchors, image.boxes, image.pixels.shape, n_neg - len(negatives), cfg.neg_iou, rng
    )
    return [(box, image.class_id) for box in positives] + [(box, BACKGROUND) for box in negatives]


def episode_loss(model: MSDDModel, task: Task, rng: np.random.Generator) -> Tuple[Tensor, float, float]:
    """L = mean over query images of L_loc + mean L_cla over the image's sampled ROIs.

    Must run under a tape for the result to be differentiable.

    :return: the loss tensor and the mean L_loc and L_cla values
    """
    cfg = model.cfg
    vectors = reweighting_vectors(model, task.support)
    bank = build_bank(model, task.support, vectors, rng)

    image_losses, loc_values, cla_values = [], [], []
    for image in task.query:
        features = model.feature(image.pixels)
        objectness, deltas = model.rpn_outputs(features)
        anchors = model.anchors((features.shape[1], features.shape[2]))
        l_loc = loc_loss(objectness, deltas, build_loc_targets(anchors, image.boxes, cfg.proposals, rng))
        proposals = model.propose(features, objectness, deltas, image.pixels.shape)

        feats = class_features(features, vectors)
        roi_losses = []
        for box, label in query_rois(model, image, proposals, anchors, rng):
            embeddings = pooled_embeddings(feats, box, cfg.proposals.stride, cfg.roi_size)
            roi_losses.append(cla_loss_from_logits(classify(embeddings, bank), label))
        l_cla = mean(stack(roi_losses))
        image_losses.append(total_loss(l_loc, l_cla))
        loc_values.append(l_loc.item())
        cla_values.append(l_cla.item())
    return mean(stack(image_losses)), float(np.mean(loc_values)), float(np.mean(cla_values))


# -----------------------------------------------------------------------------
# Trainer
# -----------------------------------------------------------------------------

Sampler = Callable[[np.random.Generator], Task]


def clear_buffered_bits(rng: np.random.Generator) -> None:
    """Drop the cached 32-bit half-word so the generator is fully described by its 128-bit state."""
    state = rng.bit_generator.state
    state["has_uint32"] = 0
    state["uinteger"] = 0
    rng.bit_generator.state = state


@dataclass
class Trainer:
    """One optimizer step per episode over tasks drawn from a sampler."""

    model: MSDDModel
    cfg: PhaseConfig
    rng: np.random.Generator = None  # type: ignore[assignment]
    optim: OptimState = None  # type: ignore[assignment]
    episode: int = 0
    history: List[EpisodeMetrics] = field(default_factory=list)
    touched: Set[str] = field(default_factory=set)

    def __post_init__(self):
        self.logger = logging.getLogger("Trainer")
        if self.rng is None:
            self.rng = np.random.Generator(np.random.PCG64(self.cfg.seed))
        if self.optim is None:
            self.optim = OptimState.for_parameters(self.model.parameters(), self.cfg.lr, self.cfg.momentum)

    def step(self, sampler: Sampler) -> EpisodeMetrics:
        params = self.model.parameters()
        clear_buffered_bits(self.rng)
        try:
            task = sampler(self.rng)
            self.touched |= task.image_ids
            with Tape() as tape:
                loss, l_loc, l_cla = episode_loss(self.model, task, self.rng)
            backward(loss, tape)
            for p in params:
                # Parameters the episode never reached
                if p.needs_grad and p.grad is None:
                    p.grad = np.zeros_like(p.data)
            if self.cfg.grad_clip_norm is not None:
                clip_grad_norm(params, self.cfg.grad_clip_norm)
            sgd_step(params, self.optim)
        except (ArithmeticError, ValueError) as ex:
            zero_grad(params)
            raise EpisodeError(self.episode, ex) from ex

        metrics = EpisodeMetrics(self.episode, loss.item(), l_loc, l_cla)
        self.history.append(metrics)
        self.episode += 1
        return metrics

    def train(
        self,
        sampler: Sampler,
        episodes: int,
        on_episode: Optional[Callable[["Trainer", EpisodeMetrics], None]] = None,
    ) -> List[EpisodeMetrics]:
        """Run episodes until the counter reaches ``episodes``."""
        while self.episode < episodes:
            metrics = self.step(sampler)
            self.logger.debug(
                f"Episode {metrics.episode}: L={metrics.loss:.6f} L_loc={metrics.loc_loss:.6f} "
                f"L_cla={metrics.cla_loss:.6f}"
            )
            if on_episode is not None:
                on_episode(self, metrics)
        return self.history
