"""
Run configuration models.

A run is described by one ``RunConfig`` read from a JSON (or YAML) file.
Unknown keys are rejected everywhere, so a typo aborts the command before it
touches the disk.
"""
from enum import IntEnum
from typing import List, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from msdd.corpus_models import Archetype, DefectClassSpec, Rarity, check_roster


class Phase(IntEnum):
    """Training phase marker, stored as a u8 in checkpoints."""

    INIT = 0
    BASE = 1
    FINETUNE = 2
    JOINT = 3


class StrictModel(BaseModel):
    model_config = ConfigDict(extra="forbid")


# -----------------------------------------------------------------------------
# Corpus
# -----------------------------------------------------------------------------


def default_roster() -> List[DefectClassSpec]:
    """Four common and two rare defect classes."""
    rows = [
        (0, "leak", Archetype.blob_dark, (14, 30), (0.25, 0.45), Rarity.common),
        (1, "pit", Archetype.pit_cluster, (16, 30), (0.30, 0.50), Rarity.common),
        (2, "spot", Archetype.micro_spot, (4, 9), (0.35, 0.60), Rarity.common),
        (3, "orange_skin", Archetype.texture_patch, (24, 44), (0.15, 0.30), Rarity.common),
        (4, "convex_powder", Archetype.bright_blob, (12, 26), (0.25, 0.45), Rarity.rare),
        (5, "chafed", Archetype.scratch_streak, (24, 56), (0.25, 0.45), Rarity.rare),
    ]
    return [
        DefectClassSpec(
            class_id=class_id,
            name=name,
            archetype=archetype,
            size_range=size_range,
            contrast_range=contrast_range,
            rarity=rarity,
        )
        for class_id, name, archetype, size_range, contrast_range, rarity in rows
    ]


class GeneratorConfig(StrictModel):
    image_size: Tuple[int, int] = (128, 128)
    # Originals per class, by rarity
    common_count: int = 300
    rare_count: int = 16
    # Rarities receiving the three mirror augmentations
    augment: List[Rarity] = [Rarity.rare]
    seed: int = 7
    workers: int = 4

    @field_validator("image_size")
    def check_image_size(cls, value):
        height, width = value
        if height < 64 or width < 64:
            raise ValueError(f"image_size must be at least 64x64, got {value}.")
        if height % 8 or width % 8:
            raise ValueError(f"image_size must be divisible by 8, got {value}.")
        return value

    @field_validator("common_count", "rare_count")
    def check_count(cls, value):
        if value < 1:
            raise ValueError(f"Per-class counts must be at least 1, got {value}.")
        return value


class SplitPolicy(StrictModel):
    eval_fraction: float = 0.25
    seed: int = 11

    @field_validator("eval_fraction")
    def check_eval_fraction(cls, value):
        if not 0 < value < 1:
            raise ValueError(f"eval_fraction must lie in (0, 1), got {value}.")
        return value


# -----------------------------------------------------------------------------
# Model
# -----------------------------------------------------------------------------


class BackboneConfig(StrictModel):
    stem_channels: int = 8
    stage_channels: Tuple[int, int, int] = (16, 32, 64)
    fpn_channels: int = 32


class ProposalConfig(StrictModel):
    stride: int = 4
    anchor_sides: Tuple[int, ...] = (16, 32, 64)
    pre_nms_top: int = 32
    nms_iou: float = 0.5
    post_nms_top: int = 8
    score_min: float = 0.5
    pos_iou: float = 0.5
    neg_iou: float = 0.3
    anchors_per_image: int = 32
    low_quality_matches: bool = True

    @model_validator(mode="after")
    def check_thresholds(self):
        if not 0 <= self.neg_iou <= self.pos_iou <= 1:
            raise ValueError(f"Expected 0 <= neg_iou <= pos_iou <= 1, got {self.neg_iou}, {self.pos_iou}.")
        if self.anchors_per_image < 2:
            raise ValueError("anchors_per_image must be at least 2.")
        return self


class ModelConfig(StrictModel):
    backbone: BackboneConfig = Field(default_factory=BackboneConfig)
    proposals: ProposalConfig = Field(default_factory=ProposalConfig)
    roi_size: int = 4
    # Ablation switches
    feature_fusion: bool = True
    reweighting: bool = True
    init_seed: int = 3

    @property
    def embedding_dim(self) -> int:
        return self.backbone.fpn_channels * self.roi_size * self.roi_size


# -----------------------------------------------------------------------------
# Training and evaluation
# -----------------------------------------------------------------------------


class PhaseConfig(StrictModel):
    phase: Phase
    episodes: int
    s: int = 5
    q: int = 2
    lr: float = 1e-4
    momentum: float = 0.9
    seed: int = 0
    grad_clip_norm: Optional[float] = 10.0
    checkpoint_every: int = 50
    freeze_extractor: bool = False

    @field_validator("s", "q", "episodes")
    def check_positive(cls, value):
        if value < 1:
            raise ValueError(f"Expected a positive value, got {value}.")
        return value

    @field_validator("lr")
    def check_lr(cls, value):
        if value <= 0:
            raise ValueError(f"lr must be positive, got {value}.")
        return value

    @field_validator("momentum")
    def check_momentum(cls, value):
        if not 0 <= value < 1:
            raise ValueError(f"momentum must lie in [0, 1), got {value}.")
        return value


class EvalConfig(StrictModel):
    score_min: float = 0.5
    iou_thr: float = 0.5
    workers: int = 4


class RunConfig(StrictModel):
    """Everything a command needs besides its input files."""

    corpus_dir: str = "corpus"
    classes: List[DefectClassSpec] = Field(default_factory=default_roster)
    generator: GeneratorConfig = Field(default_factory=GeneratorConfig)
    split: SplitPolicy = Field(default_factory=SplitPolicy)
    model: ModelConfig = Field(default_factory=ModelConfig)
    base: PhaseConfig = Field(default_factory=lambda: PhaseConfig(phase=Phase.BASE, episodes=200, seed=101))
    finetune: PhaseConfig = Field(
        default_factory=lambda: PhaseConfig(phase=Phase.FINETUNE, episodes=100, seed=202, freeze_extractor=True)
    )
    joint: PhaseConfig = Field(default_factory=lambda: PhaseConfig(phase=Phase.JOINT, episodes=300, seed=303))
    evaluation: EvalConfig = Field(default_factory=EvalConfig)

    @field_validator("classes")
    def check_classes(cls, value):
        return check_roster(value)

    @model_validator(mode="before")
    @classmethod
    def fill_phase_markers(cls, data):
        # Phase sections may omit their marker, it follows from the section name
        if isinstance(data, dict):
            for key, phase in (("base", Phase.BASE), ("finetune", Phase.FINETUNE), ("joint", Phase.JOINT)):
                section = data.get(key)
                if isinstance(section, dict) and "phase" not in section:
                    data = {**data, key: {**section, "phase": phase}}
            section = data.get("finetune")
            if isinstance(section, dict) and "freeze_extractor" not in section:
                data = {**data, "finetune": {**section, "freeze_extractor": True}}
        return data

    @model_validator(mode="after")
    def check_phases(self):
        if self.base.phase != Phase.BASE:
            raise ValueError(f"base section must declare phase {Phase.BASE.name}.")
        if self.finetune.phase != Phase.FINETUNE:
            raise ValueError(f"finetune section must declare phase {Phase.FINETUNE.name}.")
        if self.joint.phase != Phase.JOINT:
            raise ValueError(f"joint section must declare phase {Phase.JOINT.name}.")
        return self

    @property
    def common_classes(self) -> List[int]:
        return [spec.class_id for spec in self.classes if spec.rarity == Rarity.common]

    @property
    def rare_classes(self) -> List[int]:
        return [spec.class_id for spec in self.classes if spec.rarity == Rarity.rare]

    def with_seed(self, seed: int) -> "RunConfig":
        """Copy of the config with every seed replaced by ``seed``."""
        update = self.model_copy(deep=True)
        update.generator.seed = seed
        update.split.seed = seed
        update.model.init_seed = seed
        update.base.seed = seed
        update.finetune.seed = seed + 1
        update.joint.seed = seed + 2
        return update
