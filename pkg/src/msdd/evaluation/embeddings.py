"""
Metric-space embedding export with a two-component PCA projection.
"""
import csv
from dataclasses import dataclass
from pathlib import Path
from typing import List, Sequence, Tuple

import numpy as np

from msdd.autodiff import no_grad
from msdd.corpus_models import DefectImage
from msdd.model.metric_head import embed
from msdd.model.proposals import roi_pool
from msdd.model.reweight import apply_reweighting
from msdd.training.deploy import DeployedModel

POWER_ITERATIONS = 1000
POWER_TOL = 1e-12


@dataclass
class EmbeddingRow:
    class_id: int
    is_prototype: bool
    vector: np.ndarray
    pca: Tuple[float, float] = (0.0, 0.0)


def top_components(data: np.ndarray, k: int = 2) -> Tuple[np.ndarray, np.ndarray]:
    """Leading eigenpairs of the sample covariance by power iteration with deflation.

    :return: eigenvalues [k], descending, and unit eigenvectors [k, d]; each
        vector's largest-magnitude entry is positive
    """
    centered = data - data.mean(axis=0)
    n, d = centered.shape
    cov = centered.T @ centered / max(n - 1, 1)
    values, vectors = [], []
    for index in range(min(k, d)):
        v = np.random.default_rng(index).standard_normal(d)
        v /= np.linalg.norm(v)
        for _ in range(POWER_ITERATIONS):
            w = cov @ v
            norm = np.linalg.norm(w)
            if norm == 0:
                break
            w /= norm
            converged = np.linalg.norm(w - v) < POWER_TOL
            v = w
            if converged:
                break
        value = float(v @ cov @ v)
        if v[np.argmax(np.abs(v))] < 0:
            v = -v
        values.append(value)
        vectors.append(v)
        cov = cov - value * np.outer(v, v)
    return np.asarray(values), np.asarray(vectors)


def project(data: np.ndarray, k: int = 2) -> np.ndarray:
    """Coordinates of the centered ``data`` on its top ``k`` components, zero-padded to ``k`` columns."""
    _, components = top_components(data, k)
    coords = (data - data.mean(axis=0)) @ components.T
    if coords.shape[1] < k:
        coords = np.pad(coords, ((0, 0), (0, k - coords.shape[1])))
    return coords


def export_embeddings(deployed: DeployedModel, images: Sequence[DefectImage]) -> List[EmbeddingRow]:
    """One row per ground-truth box, pooled from its own class' reweighted feature, then one per prototype.

    Images are visited in id order; the background prototype comes last.
    """
    model = deployed.model
    stride, size = model.cfg.proposals.stride, model.cfg.roi_size
    rows = []
    with no_grad():
        for image in sorted(images, key=lambda image: image.id):
            if image.class_id not in deployed.vectors:
                raise ValueError(f"Image {image.id} belongs to class {image.class_id}, which is not deployed.")
            reweighted = apply_reweighting(model.feature(image.pixels), deployed.vectors[image.class_id])
            for box in image.boxes:
                vector = embed(roi_pool(reweighted, box, stride, size)).data.astype(np.float64)
                rows.append(EmbeddingRow(image.class_id, False, vector))
    for prototype in deployed.bank.prototypes():
        rows.append(EmbeddingRow(prototype.class_id, True, prototype.c.data.astype(np.float64)))

    coords = project(np.stack([row.vector for row in rows]))
    for row, (x, y) in zip(rows, coords):
        row.pca = (float(x), float(y))
    return rows


def class_separation(rows: Sequence[EmbeddingRow]) -> Tuple[float, float]:
    """Mean pairwise distance within classes and across classes, prototypes excluded."""
    samples = [row for row in rows if not row.is_prototype]
    if len(samples) < 2:
        raise ValueError("At least two embeddings are needed.")
    data = np.stack([row.vector for row in samples])
    labels = np.asarray([row.class_id for row in samples])
    squared = (data**2).sum(axis=1)
    distances = np.sqrt(np.maximum(squared[:, None] + squared[None, :] - 2 * data @ data.T, 0.0))
    upper = np.triu(np.ones_like(distances, dtype=bool), k=1)
    same = labels[:, None] == labels[None, :]
    intra, inter = distances[upper & same], distances[upper & ~same]
    if not len(intra) or not len(inter):
        raise ValueError("Both intra-class and inter-class pairs are needed.")
    return float(intra.mean()), float(inter.mean())


def write_embeddings(rows: Sequence[EmbeddingRow], path: Path) -> None:
    dim = len(rows[0].vector) if rows else 0
    with open(path, "w", newline="") as file:
        writer = csv.writer(file, lineterminator="\n")
        writer.writerow(["class_id", "is_prototype", "pca_x", "pca_y"] + [f"e{j}" for j in range(dim)])
        for row in rows:
            writer.writerow(
                [row.class_id, int(row.is_prototype), repr(row.pca[0]), repr(row.pca[1])]
                + [repr(float(v)) for v in row.vector]
            )
