"""
Synthetic imbalanced defect corpus: generation, augmentation, splitting and
the ``gen-data`` command.
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import typer
from rich import print_json
from rich.console import Console

from msdd.config_models import RunConfig, SplitPolicy
from msdd.corpus_models import (
    BBoxAnnotation,
    Corpus,
    CorpusManifest,
    DefectClassSpec,
    DefectImage,
    Rarity,
    Transform,
    check_roster,
)
from msdd.synthgen.render import render_image
from msdd.synthgen.storage import content_hash, load_corpus, save_corpus
from msdd.utils import (
    archive_config,
    attach_run_log,
    detach_run_log,
    load_run_config,
    one_line,
    prepare_output_dir,
)

GENERATOR_VERSION = "1.0"

console = Console()

# -----------------------------------------------------------------------------
# Generation
# -----------------------------------------------------------------------------


def image_id(class_id: int, index: int) -> str:
    return f"c{class_id}-{index:05d}"


def _render_original(job: Tuple[DefectClassSpec, int, Tuple[int, int], int]) -> DefectImage:
    spec, index, image_size, seed = job
    # Independent stream per image, whatever the scheduling order
    rng = np.random.default_rng([seed, spec.class_id, index])
    pixels, annotations = render_image(spec, image_size, rng)
    identifier = image_id(spec.class_id, index)
    return DefectImage(
        id=identifier,
        pixels=pixels,
        class_id=spec.class_id,
        annotations=annotations,
        provenance=Transform.original,
        source_id=identifier,
    )


def generate_corpus(
    specs: Sequence[DefectClassSpec],
    counts: Dict[int, int],
    image_size: Tuple[int, int],
    seed: int,
    augment_rarities: Sequence[Rarity] = (Rarity.rare,),
    workers: int = 1,
) -> Corpus:
    """Render a deterministic corpus.

    :param specs: the class roster
    :param counts: number of original images per class id
    :param image_size: (height, width)
    :param seed: corpus seed
    :param augment_rarities: classes of these rarities also get the three mirrored variants of every original
    :param workers: rendering threads; the result does not depend on it

    :return: the corpus, images ordered by class then original index
    """
    logger = logging.getLogger("CorpusGenerator")
    specs = check_roster(list(specs))
    height, width = image_size
    if height < 64 or width < 64:
        raise ValueError(f"image_size must be at least 64x64, got {image_size}.")
    for spec in specs:
        if counts.get(spec.class_id, 0) < 1:
            raise ValueError(f"Class {spec.class_id} ({spec.name}) needs at least one image.")

    jobs = [(spec, index, image_size, seed) for spec in specs for index in range(counts[spec.class_id])]
    logger.info(f"Rendering {len(jobs)} original images with {workers} worker(s)...")
    with ThreadPoolExecutor(max_workers=max(1, workers)) as executor:
        originals = list(executor.map(_render_original, jobs))

    images: List[DefectImage] = []
    for original in originals:
        images.append(original)
        if specs[original.class_id].rarity in augment_rarities:
            images.extend(augment(original, transform) for transform in AUGMENTATIONS)

    final_counts = {spec.class_id: 0 for spec in specs}
    for image in images:
        final_counts[image.class_id] += 1
    manifest = CorpusManifest(
        seed=seed,
        generator_version=GENERATOR_VERSION,
        image_size=image_size,
        classes=specs,
        original_counts={spec.class_id: counts[spec.class_id] for spec in specs},
        counts=final_counts,
        augmented=sorted(set(augment_rarities), key=lambda rarity: rarity.value),
        content_hash=content_hash(images),
    )
    logger.info(f"Corpus ready: {final_counts}")
    return Corpus(class_specs=specs, images=images, manifest=manifest)


def generate_from_config(config: RunConfig) -> Corpus:
    generator = config.generator
    counts = {
        spec.class_id: generator.common_count if spec.rarity == Rarity.common else generator.rare_count
        for spec in config.classes
    }
    return generate_corpus(
        config.classes,
        counts,
        generator.image_size,
        generator.seed,
        augment_rarities=generator.augment,
        workers=generator.workers,
    )


# -----------------------------------------------------------------------------
# Augmentation
# -----------------------------------------------------------------------------

AUGMENTATIONS = (Transform.hmirror, Transform.vmirror, Transform.rot180)

# Mirrors form a Klein four-group: every element is its own inverse
_FLIPS = {
    Transform.original: (False, False),
    Transform.hmirror: (True, False),
    Transform.vmirror: (False, True),
    Transform.rot180: (True, True),
}


def compose(first: Transform, second: Transform) -> Transform:
    h = _FLIPS[first][0] != _FLIPS[second][0]
    v = _FLIPS[first][1] != _FLIPS[second][1]
    return next(transform for transform, flips in _FLIPS.items() if flips == (h, v))


def transform_box(box: Tuple[int, int, int, int], transform: Transform, width: int, height: int):
    x1, y1, x2, y2 = box
    h, v = _FLIPS[transform]
    if h:
        x1, x2 = width - x2, width - x1
    if v:
        y1, y2 = height - y2, height - y1
    return (x1, y1, x2, y2)


def augment(image: DefectImage, transform: Transform) -> DefectImage:
    """Mirror ``image`` and its boxes.

    Provenance composes, so applying the same mirror twice gives back the
    original image, id included.
    """
    height, width = image.pixels.shape
    h, v = _FLIPS[transform]
    pixels = image.pixels
    if h:
        pixels = pixels[:, ::-1]
    if v:
        pixels = pixels[::-1, :]

    provenance = compose(image.provenance, transform)
    identifier = image.source_id if provenance == Transform.original else f"{image.source_id}_{provenance.value}"
    return DefectImage(
        id=identifier,
        pixels=np.ascontiguousarray(pixels),
        class_id=image.class_id,
        annotations=[
            BBoxAnnotation(class_id=a.class_id, box=transform_box(a.box, transform, width, height))
            for a in image.annotations
        ],
        provenance=provenance,
        source_id=image.source_id,
    )


# -----------------------------------------------------------------------------
# Splitting
# -----------------------------------------------------------------------------


@dataclass
class CorpusSplit:
    """Disjoint training and evaluation sets.

    ``base`` holds the common-class training images, ``full`` the training
    images of every class and ``eval`` the held-out images of every class.
    """

    base: List[DefectImage]
    full: List[DefectImage]
    eval: List[DefectImage]
    common_classes: List[int]
    rare_classes: List[int]

    def by_class(self, images: Sequence[DefectImage]) -> Dict[int, List[DefectImage]]:
        pools: Dict[int, List[DefectImage]] = {c: [] for c in sorted(self.common_classes + self.rare_classes)}
        for image in images:
            pools.setdefault(image.class_id, []).append(image)
        return pools

    def membership(self) -> Dict[str, List[str]]:
        return {
            "train": sorted(image.id for image in self.full),
            "eval": sorted(image.id for image in self.eval),
        }


def split_corpus(
    corpus: Corpus,
    policy: SplitPolicy,
    common_classes: Sequence[int],
    rare_classes: Sequence[int],
    min_train: int = 7,
) -> CorpusSplit:
    """Split ``corpus`` by source image so that augmentations never straddle sets.

    Per class, ``floor(eval_fraction * sources)`` source groups go to
    evaluation.

    :param min_train: fewest training images a class may keep (s + q)
    :raises ValueError: when a class keeps fewer than ``min_train`` training images
    """
    logger = logging.getLogger("CorpusSplitter")
    overlap = set(common_classes) & set(rare_classes)
    if overlap:
        raise ValueError(f"Classes {sorted(overlap)} are both common and rare.")

    groups: Dict[int, Dict[str, List[DefectImage]]] = {}
    for image in corpus.images:
        groups.setdefault(image.class_id, {}).setdefault(image.source_id, []).append(image)

    train: Dict[int, List[DefectImage]] = {}
    held_out: Dict[int, List[DefectImage]] = {}
    for class_id in sorted(set(common_classes) | set(rare_classes)):
        name = corpus.spec(class_id).name
        sources = sorted(groups.get(class_id, {}))
        order = np.random.default_rng([policy.seed, class_id]).permutation(len(sources))
        n_eval = int(np.floor(policy.eval_fraction * len(sources)))
        eval_sources = {sources[i] for i in order[:n_eval]}

        train[class_id] = [img for src in sources if src not in eval_sources for img in groups[class_id][src]]
        held_out[class_id] = [img for src in sources if src in eval_sources for img in groups[class_id][src]]
        if len(train[class_id]) < min_train:
            raise ValueError(
                f"Class {class_id} ({name}) keeps {len(train[class_id])} training images, needs at least {min_train}."
            )
        logger.info(f"Class {class_id} ({name}): {len(train[class_id])} train / {len(held_out[class_id])} eval")

    return CorpusSplit(
        base=[img for c in sorted(common_classes) for img in train[c]],
        full=[img for c in sorted(train) for img in train[c]],
        eval=[img for c in sorted(held_out) for img in held_out[c]],
        common_classes=sorted(common_classes),
        rare_classes=sorted(rare_classes),
    )


def split_from_config(corpus: Corpus, config: RunConfig) -> CorpusSplit:
    min_train = max(config.base.s + config.base.q, config.finetune.s + config.finetune.q)
    return split_corpus(corpus, config.split, config.common_classes, config.rare_classes, min_train=min_train)


def resolve_split(corpus: Corpus, config: RunConfig) -> CorpusSplit:
    """Split ``corpus`` under ``config`` and check it against the membership recorded at generation.

    :raises ValueError: when the recorded membership differs
    """
    split = split_from_config(corpus, config)
    recorded = corpus.manifest.split
    if recorded is not None and recorded != split.membership():
        raise ValueError("The corpus was split under a different policy than the configuration describes.")
    return split


# -----------------------------------------------------------------------------
# CLI
# -----------------------------------------------------------------------------


def gen_data(
    config_path: Optional[Path] = typer.Option(None, "--config", help="Path to the run configuration"),
    seed: Optional[int] = typer.Option(None, help="Override every seed of the configuration"),
    out: Path = typer.Option(Path("corpus"), help="Corpus output directory"),
    force: bool = typer.Option(False, help="Overwrite a non-empty output directory"),
):
    """
    Generate the synthetic defect corpus

    This command will:
    - Render every class of the roster
    - Augment the rare classes
    - Record the split membership and write the corpus layout
    """
    console.print("[blue]:information_source:[/blue] [bold]CLI:[/bold] Generating the corpus...")
    try:
        config = load_run_config(config_path, seed)
        prepare_output_dir(out, force)
    except (ValueError, OSError) as ex:
        console.print(f"[red]:heavy_multiplication_x:[/red] [bold]CLI:[/bold] {one_line(ex)}")
        raise typer.Exit(code=1)

    handler = attach_run_log(out)
    try:
        corpus = generate_from_config(config)
        split = split_from_config(corpus, config)
        corpus.manifest.split = split.membership()
        save_corpus(corpus, out)
        archive_config(config, out)
    except (ValueError, OSError) as ex:
        console.print(f"[red]:heavy_multiplication_x:[/red] [bold]CLI:[/bold] {one_line(ex)}")
        raise typer.Exit(code=1)
    finally:
        detach_run_log(handler)

    for spec in corpus.class_specs:
        console.print(
            f"\t[green]:heavy_check_mark:[/green] Class {spec.class_id} {spec.name} "
            f"({spec.rarity.value}): {corpus.manifest.counts[spec.class_id]} images"
        )
    print_json(corpus.manifest.model_dump_json(include={"seed", "counts", "content_hash"}))
    console.print(f"[green]:heavy_check_mark:[/green] [bold]CLI:[/bold] Corpus written to {out}.")


__all__ = [
    "AUGMENTATIONS",
    "CorpusSplit",
    "augment",
    "compose",
    "generate_corpus",
    "gen_data",
    "generate_from_config",
    "load_corpus",
    "save_corpus",
    "split_corpus",
    "resolve_split",
    "split_from_config",
]
