"""
Corpus directory layout.

    <dir>/manifest.json        reproducibility record
    <dir>/images/<id>.pgm      binary PGM (P5), maxval 255
    <dir>/annotations.jsonl    one record per image
"""
import hashlib
import logging
from pathlib import Path
from typing import List, Sequence, Tuple

import numpy as np
from PIL import Image
from pydantic import BaseModel, ConfigDict, ValidationError

from msdd.corpus_models import BBoxAnnotation, Corpus, CorpusManifest, DefectImage, Transform

MANIFEST = "manifest.json"
ANNOTATIONS = "annotations.jsonl"
IMAGES = "images"


class ProvenanceRecord(BaseModel):
    model_config = ConfigDict(extra="forbid")

    transform: Transform
    source: str


class AnnotationRecord(BaseModel):
    """One line of ``annotations.jsonl``."""

    model_config = ConfigDict(extra="forbid")

    id: str
    file: str
    class_id: int
    boxes: List[Tuple[int, int, int, int]]
    provenance: ProvenanceRecord


def content_hash(images: Sequence[DefectImage]) -> str:
    """SHA-256 over ids, pixels and boxes, in corpus order."""
    digest = hashlib.sha256()
    for image in images:
        digest.update(image.id.encode("utf-8"))
        digest.update(image.pixels.tobytes())
        for box in image.boxes:
            digest.update(np.asarray(box, dtype="<i4").tobytes())
    return digest.hexdigest()


def write_pgm(path: Path, pixels: np.ndarray) -> None:
    Image.fromarray(pixels).save(path, format="PPM")


def read_pgm(path: Path) -> np.ndarray:
    with Image.open(path) as image:
        if image.mode != "L":
            raise ValueError(f"{path} is not an 8-bit grayscale image.")
        return np.array(image, dtype=np.uint8)


def save_corpus(corpus: Corpus, out_dir: Path) -> None:
    """Write ``corpus`` into ``out_dir`` using the corpus directory layout."""
    logger = logging.getLogger("CorpusStorage")
    (out_dir / IMAGES).mkdir(parents=True, exist_ok=True)

    lines = []
    for image in corpus.images:
        file = f"{IMAGES}/{image.id}.pgm"
        write_pgm(out_dir / file, image.pixels)
        record = AnnotationRecord(
            id=image.id,
            file=file,
            class_id=image.class_id,
            boxes=image.boxes,
            provenance=ProvenanceRecord(transform=image.provenance, source=image.source_id),
        )
        lines.append(record.model_dump_json())
    (out_dir / ANNOTATIONS).write_text("\n".join(lines) + "\n")
    (out_dir / MANIFEST).write_text(corpus.manifest.model_dump_json(indent=4) + "\n")
    logger.info(f"Wrote {len(corpus.images)} images to {out_dir}")


def load_corpus(corpus_dir: Path) -> Corpus:
    """Read and validate a corpus directory.

    :raises ValueError: on a missing file, a malformed record, a count
        mismatch or a content hash mismatch
    """
    logger = logging.getLogger("CorpusStorage")
    manifest_path = corpus_dir / MANIFEST
    annotations_path = corpus_dir / ANNOTATIONS
    for path in (manifest_path, annotations_path):
        if not path.is_file():
            raise ValueError(f"Corpus file {path} is missing.")

    try:
        manifest = CorpusManifest.model_validate_json(manifest_path.read_text())
        images = []
        for line in annotations_path.read_text().splitlines():
            if not line.strip():
                continue
            record = AnnotationRecord.model_validate_json(line)
            image_path = corpus_dir / record.file
            if not image_path.is_file():
                raise ValueError(f"Image file {image_path} is missing.")
            images.append(
                DefectImage(
                    id=record.id,
                    pixels=read_pgm(image_path),
                    class_id=record.class_id,
                    annotations=[BBoxAnnotation(class_id=record.class_id, box=box) for box in record.boxes],
                    provenance=record.provenance.transform,
                    source_id=record.provenance.source,
                )
            )
        corpus = Corpus(class_specs=manifest.classes, images=images, manifest=manifest)
    except ValidationError as ex:
        raise ValueError(f"Invalid corpus in {corpus_dir}:\n{ex}") from ex

    actual = content_hash(corpus.images)
    if actual != manifest.content_hash:
        raise ValueError(f"Corpus content hash {actual} does not match the manifest ({manifest.content_hash}).")
    logger.info(f"Loaded {len(images)} images from {corpus_dir}")
    return corpus
