from enum import Enum
from typing import Dict, List, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, field_validator, model_validator

# -----------------------------------------------------------------------------
# Class roster
# -----------------------------------------------------------------------------


class Archetype(str, Enum):
    """Visual family of a synthetic defect."""

    blob_dark = "blob_dark"
    pit_cluster = "pit_cluster"
    micro_spot = "micro_spot"
    texture_patch = "texture_patch"
    bright_blob = "bright_blob"
    scratch_streak = "scratch_streak"


class Rarity(str, Enum):
    common = "common"
    rare = "rare"


class Transform(str, Enum):
    """Provenance of an image: the original or one of its mirrored variants."""

    original = "original"
    hmirror = "hmirror"
    vmirror = "vmirror"
    rot180 = "rot180"


class DefectClassSpec(BaseModel):
    """One defect class of the corpus."""

    model_config = ConfigDict(extra="forbid")

    class_id: int
    name: str
    archetype: Archetype
    # Extent of a rendered instance, in pixels
    size_range: Tuple[int, int]
    # Intensity change as a fraction of the 8-bit range
    contrast_range: Tuple[float, float]
    rarity: Rarity

    @field_validator("size_range")
    def check_size_range(cls, value):
        low, high = value
        if not 1 <= low <= high:
            raise ValueError(f"Invalid size_range {value}: expected 1 <= low <= high.")
        return value

    @field_validator("contrast_range")
    def check_contrast_range(cls, value):
        low, high = value
        if not 0 <= low <= high <= 1:
            raise ValueError(f"Invalid contrast_range {value}: expected 0 <= low <= high <= 1.")
        return value


def check_roster(specs: List[DefectClassSpec]) -> List[DefectClassSpec]:
    """Class ids must be contiguous from 0 with exactly one spec per class."""
    ids = sorted(spec.class_id for spec in specs)
    if ids != list(range(len(specs))):
        raise ValueError(f"Class ids must be contiguous from 0, got {ids}.")
    return sorted(specs, key=lambda spec: spec.class_id)


# -----------------------------------------------------------------------------
# Images and annotations
# -----------------------------------------------------------------------------


class BBoxAnnotation(BaseModel):
    """Class-labeled box, half-open: x1 <= x < x2, y1 <= y < y2."""

    model_config = ConfigDict(frozen=True)

    class_id: int
    box: Tuple[int, int, int, int]

    @field_validator("box")
    def check_box(cls, value):
        x1, y1, x2, y2 = value
        if x1 < 0 or y1 < 0 or x1 >= x2 or y1 >= y2:
            raise ValueError(f"Invalid box {value}: expected 0 <= x1 < x2 and 0 <= y1 < y2.")
        return value

    @property
    def area(self) -> int:
        x1, y1, x2, y2 = self.box
        return (x2 - x1) * (y2 - y1)


class DefectImage(BaseModel):
    """Grayscale 8-bit image holding one or more defects of a single class."""

    # Allow numpy pixel buffers
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    id: str
    pixels: np.ndarray
    class_id: int
    annotations: List[BBoxAnnotation]
    provenance: Transform = Transform.original
    source_id: str

    @field_validator("pixels")
    def check_pixels(cls, value):
        if value.ndim != 2 or value.dtype != np.uint8:
            raise ValueError(f"pixels must be a 2-D uint8 array, got {value.ndim}-D {value.dtype}.")
        return value

    @model_validator(mode="after")
    def check_annotations(self):
        if not self.annotations:
            raise ValueError(f"Image {self.id} has no annotation.")
        height, width = self.pixels.shape
        for annotation in self.annotations:
            if annotation.class_id != self.class_id:
                raise ValueError(
                    f"Image {self.id} of class {self.class_id} holds an annotation of class {annotation.class_id}."
                )
            x1, y1, x2, y2 = annotation.box
            if x2 > width or y2 > height:
                raise ValueError(f"Box {annotation.box} exceeds the {width}x{height} image {self.id}.")
        return self

    @property
    def boxes(self) -> List[Tuple[int, int, int, int]]:
        return [annotation.box for annotation in self.annotations]


# -----------------------------------------------------------------------------
# Corpus
# -----------------------------------------------------------------------------


class CorpusManifest(BaseModel):
    """Reproducibility record of a generated corpus."""

    model_config = ConfigDict(extra="forbid")

    seed: int
    generator_version: str
    image_size: Tuple[int, int]
    classes: List[DefectClassSpec]
    # Originals per class, before augmentation
    original_counts: Dict[int, int]
    # All images per class
    counts: Dict[int, int]
    augmented: List[Rarity] = []
    content_hash: str
    # Split membership, filled in when a split is recorded: set name -> image ids
    split: Dict[str, List[str]] | None = None


class Corpus(BaseModel):
    """Class roster, images and manifest."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    class_specs: List[DefectClassSpec]
    images: List[DefectImage]
    manifest: CorpusManifest

    @model_validator(mode="after")
    def check_counts(self):
        actual: Dict[int, int] = {spec.class_id: 0 for spec in self.class_specs}
        for image in self.images:
            actual[image.class_id] = actual.get(image.class_id, 0) + 1
        if actual != dict(self.manifest.counts):
            raise ValueError(f"Manifest counts {self.manifest.counts} do not match the images {actual}.")
        return self

    def spec(self, class_id: int) -> DefectClassSpec:
        for spec in self.class_specs:
            if spec.class_id == class_id:
                return spec
        raise KeyError(f"Unknown class {class_id}.")

    def by_id(self) -> Dict[str, DefectImage]:
        return {image.id: image for image in self.images}
