"""
Rendering of synthetic defect images.

An image is a band-structured background, evoking an extruded aluminum
profile, with one to three instances of a single defect archetype on top.
Every instance is rasterized as a binary mask with Pillow; its annotation is
the tight bounding box of that mask.
"""
from typing import Callable, Dict, List, Tuple

import numpy as np
from PIL import Image, ImageDraw

from msdd.corpus_models import Archetype, BBoxAnnotation, DefectClassSpec

Box = Tuple[int, int, int, int]
# Draws a binary mask onto a square patch of the given side
MaskPainter = Callable[[ImageDraw.ImageDraw, int, np.random.Generator], None]

MARGIN = 2
MAX_INSTANCES = 3
PLACEMENT_TRIES = 50

# -----------------------------------------------------------------------------
# Background
# -----------------------------------------------------------------------------


def render_background(height: int, width: int, rng: np.random.Generator) -> np.ndarray:
    """Horizontal band noise plus low-amplitude white noise, as float pixels."""
    level = rng.uniform(110.0, 150.0)
    rows = rng.normal(0.0, 6.0, size=height + 8)
    bands = np.convolve(rows, np.ones(9) / 9.0, mode="valid")[:height]
    streaks = rng.normal(0.0, 1.5, size=(height, 1)) * np.linspace(0.8, 1.2, width)[None, :]
    grain = rng.normal(0.0, 3.0, size=(height, width))
    return level + bands[:, None] + streaks + grain


# -----------------------------------------------------------------------------
# Archetype masks
# -----------------------------------------------------------------------------


def _paint_ellipse(draw: ImageDraw.ImageDraw, side: int, rng: np.random.Generator) -> None:
    rx = rng.uniform(0.6, 1.0) * (side - 1) / 2
    ry = rng.uniform(0.6, 1.0) * (side - 1) / 2
    cx = cy = (side - 1) / 2
    draw.ellipse([cx - rx, cy - ry, cx + rx, cy + ry], fill=1)


def _paint_pits(draw: ImageDraw.ImageDraw, side: int, rng: np.random.Generator) -> None:
    for _ in range(int(rng.integers(3, 7))):
        radius = int(rng.integers(1, 4))
        x = rng.uniform(radius, side - 1 - radius)
        y = rng.uniform(radius, side - 1 - radius)
        draw.ellipse([x - radius, y - radius, x + radius, y + radius], fill=1)


def _paint_patch(draw: ImageDraw.ImageDraw, side: int, rng: np.random.Generator) -> None:
    inset = rng.uniform(0.0, 0.15) * side
    draw.rounded_rectangle([inset, inset, side - 1 - inset, side - 1 - inset], radius=side // 4, fill=1)


def _paint_streak(draw: ImageDraw.ImageDraw, side: int, rng: np.random.Generator) -> None:
    y0 = rng.uniform(0, side - 1)
    y1 = rng.uniform(0, side - 1)
    if rng.random() < 0.5:
        draw.line([(0, y0), (side - 1, y1)], fill=1, width=int(rng.integers(1, 3)))
    else:
        draw.line([(y0, 0), (y1, side - 1)], fill=1, width=int(rng.integers(1, 3)))


# Archetype -> (mask painter, sign of the intensity change, textured)
ARCHETYPES: Dict[Archetype, Tuple[MaskPainter, float, bool]] = {
    Archetype.blob_dark: (_paint_ellipse, -1.0, False),
    Archetype.pit_cluster: (_paint_pits, -1.0, False),
    Archetype.micro_spot: (_paint_ellipse, -1.0, False),
    Archetype.texture_patch: (_paint_patch, -1.0, True),
    Archetype.bright_blob: (_paint_ellipse, 1.0, False),
    Archetype.scratch_streak: (_paint_streak, 1.0, False),
}


def render_mask(archetype: Archetype, side: int, rng: np.random.Generator) -> np.ndarray:
    """Binary uint8 mask of one instance on a ``side`` x ``side`` patch."""
    try:
        painter, _, _ = ARCHETYPES[archetype]
    except KeyError:
        raise ValueError(f"Unknown archetype {archetype}.") from None
    patch = Image.new("L", (side, side), 0)
    painter(ImageDraw.Draw(patch), side, rng)
    mask = np.asarray(patch, dtype=np.uint8).copy()
    if not mask.any():
        mask[side // 2, side // 2] = 1
    return mask


def _tight_box(mask: np.ndarray, left: int, top: int) -> Box:
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    return (left + int(cols[0]), top + int(rows[0]), left + int(cols[-1]) + 1, top + int(rows[-1]) + 1)


def _overlaps(box: Box, others: List[Box]) -> bool:
    x1, y1, x2, y2 = box
    for ox1, oy1, ox2, oy2 in others:
        if x1 < ox2 + MARGIN and ox1 < x2 + MARGIN and y1 < oy2 + MARGIN and oy1 < y2 + MARGIN:
            return True
    return False


# -----------------------------------------------------------------------------
# Image
# -----------------------------------------------------------------------------


def render_image(
    spec: DefectClassSpec, image_size: Tuple[int, int], rng: np.random.Generator
) -> Tuple[np.ndarray, List[BBoxAnnotation]]:
    """Render one image of class ``spec``.

    :return: the uint8 pixels and one tight annotation per instance
    """
    height, width = image_size
    if spec.archetype not in ARCHETYPES:
        raise ValueError(f"Unknown archetype {spec.archetype}.")
    _, sign, textured = ARCHETYPES[spec.archetype]

    canvas = render_background(height, width, rng)
    boxes: List[Box] = []
    for _ in range(int(rng.integers(1, MAX_INSTANCES + 1))):
        low, high = spec.size_range
        side = int(rng.integers(low, min(high, height - 2 * MARGIN, width - 2 * MARGIN) + 1))
        mask = render_mask(spec.archetype, side, rng)
        contrast = rng.uniform(*spec.contrast_range)

        placed = None
        for _ in range(PLACEMENT_TRIES):
            left = int(rng.integers(MARGIN, width - side - MARGIN + 1))
            top = int(rng.integers(MARGIN, height - side - MARGIN + 1))
            box = _tight_box(mask, left, top)
            if not _overlaps(box, boxes):
                placed = (left, top, box)
                break
        if placed is None:
            continue

        left, top, box = placed
        delta = sign * max(contrast * 255.0, 1.0) * mask.astype(np.float64)
        if textured:
            yy, xx = np.mgrid[0:side, 0:side]
            phase = rng.uniform(0, np.pi)
            delta *= 0.6 + 0.4 * np.sin(xx * 1.3 + phase) * np.sin(yy * 1.3 + phase)
        canvas[top : top + side, left : left + side] += delta
        boxes.append(box)

    pixels = np.clip(np.rint(canvas), 0, 255).astype(np.uint8)
    return pixels, [BBoxAnnotation(class_id=spec.class_id, box=box) for box in boxes]
