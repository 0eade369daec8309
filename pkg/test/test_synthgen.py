import json

import numpy as np
import pytest
from conftest import make_image

from msdd.config_models import SplitPolicy, default_roster
from msdd.corpus_models import BBoxAnnotation, DefectImage, Rarity, Transform
from msdd.synthgen import (
    AUGMENTATIONS,
    augment,
    compose,
    generate_corpus,
    load_corpus,
    resolve_split,
    save_corpus,
    split_corpus,
    transform_box,
)
from msdd.synthgen.render import render_image
from msdd.synthgen.storage import ANNOTATIONS, MANIFEST, content_hash

# -----------------------------------------------------------------------------
# Rendering
# -----------------------------------------------------------------------------


@pytest.mark.parametrize("spec", default_roster(), ids=lambda spec: spec.name)
def test_render_image_boxes(spec):
    pixels, annotations = render_image(spec, (64, 64), np.random.default_rng(0))
    assert pixels.shape == (64, 64)
    assert pixels.dtype == np.uint8
    assert annotations
    for annotation in annotations:
        x1, y1, x2, y2 = annotation.box
        assert annotation.class_id == spec.class_id
        assert 0 <= x1 < x2 <= 64 and 0 <= y1 < y2 <= 64


def test_render_image_deterministic():
    spec = default_roster()[1]
    first = render_image(spec, (64, 64), np.random.default_rng(5))
    second = render_image(spec, (64, 64), np.random.default_rng(5))
    np.testing.assert_array_equal(first[0], second[0])
    assert first[1] == second[1]


def test_generate_corpus_independent_of_workers():
    roster = default_roster()
    counts = {spec.class_id: 2 for spec in roster}
    single = generate_corpus(roster, counts, (64, 64), seed=3, workers=1)
    threaded = generate_corpus(roster, counts, (64, 64), seed=3, workers=4)
    assert single.manifest.content_hash == threaded.manifest.content_hash
    assert [image.id for image in single.images] == [image.id for image in threaded.images]


def test_generate_corpus_augments_rare_classes(tiny_corpus, tiny_config):
    counts = tiny_corpus.manifest.counts
    for spec in tiny_config.classes:
        if spec.rarity == Rarity.rare:
            assert counts[spec.class_id] == 4 * tiny_config.generator.rare_count
        else:
            assert counts[spec.class_id] == tiny_config.generator.common_count
    rare = [image for image in tiny_corpus.images if image.class_id in tiny_config.rare_classes]
    assert {image.provenance for image in rare} == set(Transform)


def test_generate_corpus_rejects_bad_input():
    roster = default_roster()
    with pytest.raises(ValueError):
        generate_corpus(roster, {spec.class_id: 1 for spec in roster}, (32, 64), seed=0)
    with pytest.raises(ValueError):
        generate_corpus(roster, {0: 1}, (64, 64), seed=0)


# -----------------------------------------------------------------------------
# Augmentation
# -----------------------------------------------------------------------------


@pytest.fixture()
def asymmetric_image():
    image = make_image("c0-00000", 0, [(3, 5, 20, 11), (40, 30, 52, 60)])
    pixels = image.pixels.copy()
    pixels[0, 0] = 7
    return image.model_copy(update={"pixels": pixels})


@pytest.mark.parametrize("transform", AUGMENTATIONS)
def test_mirror_is_involution(asymmetric_image, transform):
    twice = augment(augment(asymmetric_image, transform), transform)
    np.testing.assert_array_equal(twice.pixels, asymmetric_image.pixels)
    assert twice.boxes == asymmetric_image.boxes
    assert twice.provenance == Transform.original
    assert twice.id == asymmetric_image.id


def test_rot180_is_both_mirrors(asymmetric_image):
    rotated = augment(asymmetric_image, Transform.rot180)
    mirrored = augment(augment(asymmetric_image, Transform.hmirror), Transform.vmirror)
    np.testing.assert_array_equal(rotated.pixels, mirrored.pixels)
    np.testing.assert_array_equal(rotated.pixels, np.rot90(asymmetric_image.pixels, 2))
    assert rotated.boxes == mirrored.boxes
    assert rotated.id == mirrored.id == "c0-00000_rot180"


def test_mirrored_boxes_cover_mirrored_pixels(asymmetric_image):
    for transform in AUGMENTATIONS:
        mirrored = augment(asymmetric_image, transform)
        for x1, y1, x2, y2 in mirrored.boxes:
            assert (mirrored.pixels[y1:y2, x1:x2] == 230).all()


@pytest.mark.parametrize(
    "first, second, expected",
    [
        (Transform.hmirror, Transform.hmirror, Transform.original),
        (Transform.hmirror, Transform.vmirror, Transform.rot180),
        (Transform.rot180, Transform.vmirror, Transform.hmirror),
        (Transform.original, Transform.rot180, Transform.rot180),
    ],
)
def test_compose(first, second, expected):
    assert compose(first, second) == expected


def test_transform_box_half_open():
    assert transform_box((0, 0, 4, 2), Transform.hmirror, 64, 64) == (60, 0, 64, 2)
    assert transform_box((0, 0, 4, 2), Transform.vmirror, 64, 64) == (0, 62, 4, 64)


# -----------------------------------------------------------------------------
# Corpus models
# -----------------------------------------------------------------------------


@pytest.mark.parametrize(
    "box",
    [(5, 5, 5, 9), (5, 9, 9, 5), (-1, 0, 4, 4)],
)
def test_degenerate_boxes_rejected(box):
    with pytest.raises(ValueError):
        BBoxAnnotation(class_id=0, box=box)


def test_defect_image_validation():
    with pytest.raises(ValueError):
        make_image("a", 0, [(0, 0, 70, 10)])
    with pytest.raises(ValueError):
        DefectImage(id="b", pixels=np.zeros((8, 8), dtype=np.uint8), class_id=0, annotations=[], source_id="b")
    with pytest.raises(ValueError):
        DefectImage(
            id="c",
            pixels=np.zeros((8, 8), dtype=np.uint8),
            class_id=0,
            annotations=[BBoxAnnotation(class_id=1, box=(0, 0, 2, 2))],
            source_id="c",
        )


# -----------------------------------------------------------------------------
# Splitting
# -----------------------------------------------------------------------------


def test_split_disjoint_and_grouped(tiny_corpus, tiny_split):
    train_ids = {image.id for image in tiny_split.full}
    eval_ids = {image.id for image in tiny_split.eval}
    assert not train_ids & eval_ids
    assert train_ids | eval_ids == {image.id for image in tiny_corpus.images}

    # Augmented variants stay with their source
    train_sources = {image.source_id for image in tiny_split.full}
    eval_sources = {image.source_id for image in tiny_split.eval}
    assert not train_sources & eval_sources


def test_split_base_holds_common_classes_only(tiny_split, tiny_config):
    assert {image.class_id for image in tiny_split.base} == set(tiny_config.common_classes)
    for class_id in tiny_config.rare_classes:
        assert any(image.class_id == class_id for image in tiny_split.eval)


def test_split_eval_fraction(tiny_split, tiny_config):
    per_class = tiny_split.by_class(tiny_split.eval)
    for class_id in tiny_config.common_classes:
        assert len(per_class[class_id]) == 2
    for class_id in tiny_config.rare_classes:
        # One source of four mirrored images
        assert len(per_class[class_id]) == 4


def test_split_deterministic(tiny_corpus, tiny_config):
    policy = tiny_config.split
    first = split_corpus(tiny_corpus, policy, tiny_config.common_classes, tiny_config.rare_classes, min_train=3)
    second = split_corpus(tiny_corpus, policy, tiny_config.common_classes, tiny_config.rare_classes, min_train=3)
    assert first.membership() == second.membership()


def test_split_rejects_starved_class(tiny_corpus, tiny_config):
    with pytest.raises(ValueError, match="training images"):
        split_corpus(
            tiny_corpus, SplitPolicy(eval_fraction=0.9), tiny_config.common_classes, tiny_config.rare_classes
        )
    with pytest.raises(ValueError, match="both common and rare"):
        split_corpus(tiny_corpus, tiny_config.split, [0, 1], [1])


def test_resolve_split_checks_recorded_membership(tiny_corpus, tiny_config, tiny_split):
    recorded = tiny_corpus.model_copy(deep=True)
    recorded.manifest.split = tiny_split.membership()
    assert resolve_split(recorded, tiny_config).membership() == tiny_split.membership()

    recorded.manifest.split = {"train": [], "eval": []}
    with pytest.raises(ValueError):
        resolve_split(recorded, tiny_config)


# -----------------------------------------------------------------------------
# Storage
# -----------------------------------------------------------------------------


def test_save_load_corpus(tiny_corpus, tmp_path):
    save_corpus(tiny_corpus, tmp_path)
    loaded = load_corpus(tmp_path)
    assert loaded.manifest == tiny_corpus.manifest
    assert content_hash(loaded.images) == tiny_corpus.manifest.content_hash
    first, reloaded = tiny_corpus.images[-1], loaded.by_id()[tiny_corpus.images[-1].id]
    np.testing.assert_array_equal(first.pixels, reloaded.pixels)
    assert first.provenance == reloaded.provenance and first.source_id == reloaded.source_id


def test_load_corpus_detects_tampering(tiny_corpus, tmp_path):
    save_corpus(tiny_corpus, tmp_path)
    lines = (tmp_path / ANNOTATIONS).read_text().splitlines()
    record = json.loads(lines[0])
    x1, y1, x2, y2 = record["boxes"][0]
    record["boxes"][0] = [x1, y1, x2, y2 - 1] if y2 - 1 > y1 else [x1, y1, x2 - 1, y2]
    lines[0] = json.dumps(record)
    (tmp_path / ANNOTATIONS).write_text("\n".join(lines) + "\n")
    with pytest.raises(ValueError, match="content hash"):
        load_corpus(tmp_path)


def test_load_corpus_missing_files(tmp_path):
    with pytest.raises(ValueError, match="missing"):
        load_corpus(tmp_path)
    (tmp_path / MANIFEST).write_text("{}")
    with pytest.raises(ValueError):
        load_corpus(tmp_path)
