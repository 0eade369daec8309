"""
Deployment: freeze a trained model together with its class vectors and
prototype bank, and run detection with it.
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from msdd.autodiff import no_grad
from msdd.config_models import PhaseConfig
from msdd.corpus_models import DefectImage, Rarity
from msdd.model import MSDDModel, class_features, pooled_embeddings
from msdd.model.metric_head import BACKGROUND, ClassProbs, PrototypeBank, classify
from msdd.model.reweight import ReweightingVector
from msdd.synthgen import CorpusSplit
from msdd.training.episodes import build_bank, reweighting_vectors

# Seed stream of the canonical support draw
DEPLOY_STREAM = 1


@dataclass
class DeployedModel:
    model: MSDDModel
    vectors: Dict[int, ReweightingVector]
    bank: PrototypeBank
    rarity: Dict[int, Rarity]
    # Empty when restored from a file
    support_ids: Dict[int, List[str]] = field(default_factory=dict)
    image_size: Optional[Tuple[int, int]] = None

    @property
    def class_ids(self) -> List[int]:
        return sorted(self.vectors)


def canonical_support(split: CorpusSplit, s: int, rng: np.random.Generator) -> Dict[int, List[DefectImage]]:
    """Every rare-class training image, and ``s`` randomly chosen images per common class."""
    pools = split.by_class(split.full)
    support = {}
    for class_id, pool in sorted(pools.items()):
        ordered = sorted(pool, key=lambda image: image.id)
        if class_id in split.rare_classes:
            chosen = ordered
        else:
            if len(ordered) < s:
                raise ValueError(f"Class {class_id} has {len(ordered)} training images, deployment needs {s}.")
            chosen = [ordered[i] for i in sorted(rng.choice(len(ordered), size=s, replace=False))]
        if not chosen:
            raise ValueError(f"Class {class_id} has no training image to deploy with.")
        support[class_id] = chosen
    return support


def deploy(
    model: MSDDModel, split: CorpusSplit, cfg: PhaseConfig, rng: Optional[np.random.Generator] = None
) -> DeployedModel:
    """Compute the class vectors and the prototype bank from the canonical support set.

    Nothing is recorded for differentiation and the cached tensors are detached.
    """
    logger = logging.getLogger("Deployer")
    if rng is None:
        rng = np.random.default_rng([cfg.seed, DEPLOY_STREAM])
    support = canonical_support(split, cfg.s, rng)
    with no_grad():
        vectors = reweighting_vectors(model, support)
        bank = build_bank(model, support, vectors, rng)
    vectors = {c: ReweightingVector(v.w.detach(), c) for c, v in vectors.items()}
    rarity = {c: Rarity.rare if c in split.rare_classes else Rarity.common for c in support}
    first = next(iter(support.values()))[0]
    logger.info(f"Deployed {len(vectors)} classes from {sum(len(v) for v in support.values())} support images")
    return DeployedModel(
        model=model,
        vectors=vectors,
        bank=bank.detached(),
        rarity=rarity,
        support_ids={c: [image.id for image in images] for c, images in support.items()},
        image_size=first.pixels.shape,
    )


# -----------------------------------------------------------------------------
# Detection
# -----------------------------------------------------------------------------


@dataclass(frozen=True)
class Detection:
    box: Tuple[float, float, float, float]
    class_id: int
    score: float


def classify_proposals(deployed: DeployedModel, pixels: np.ndarray) -> List[Tuple[Tuple[float, ...], ClassProbs]]:
    """Every proposal of ``pixels`` with its class probabilities, background included."""
    if deployed.image_size is not None and tuple(pixels.shape) != tuple(deployed.image_size):
        raise ValueError(f"Image of shape {pixels.shape} does not match the deployed size {deployed.image_size}.")
    model = deployed.model
    with no_grad():
        features = model.feature(pixels)
        objectness, deltas = model.rpn_outputs(features)
        proposals = model.propose(features, objectness, deltas, pixels.shape)
        feats = class_features(features, deployed.vectors)
        stride, size = model.cfg.proposals.stride, model.cfg.roi_size
        return [
            (proposal.box, classify(pooled_embeddings(feats, proposal.box, stride, size), deployed.bank))
            for proposal in proposals
        ]


def detect(deployed: DeployedModel, pixels: np.ndarray) -> List[Detection]:
    """Label every proposal with its most probable class; background-labeled proposals are dropped."""
    detections = []
    for box, probs in classify_proposals(deployed, pixels):
        label = probs.argmax()
        if label == BACKGROUND:
            continue
        detections.append(Detection(tuple(box), label, probs.prob(label)))  # type: ignore[arg-type]
    return detections
