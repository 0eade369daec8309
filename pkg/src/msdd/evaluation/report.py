"""
Per-class evaluation report.
"""
import csv
import io
import logging
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from pydantic import BaseModel, Field

from msdd.config_models import EvalConfig
from msdd.corpus_models import DefectClassSpec, DefectImage, Rarity
from msdd.evaluation.metrics import MatchResult, ap_paper, ap_voc, match_detections, precision, recall
from msdd.training.deploy import DeployedModel, Detection, detect

REPORT_COLUMNS = ["class", "name", "rarity", "precision", "recall", "ap_paper", "ap_voc"]


class ReferenceRow(BaseModel):
    """Published per-class AP (%) of one training scheme on the real defect dataset."""

    scheme: str
    ap: Dict[str, float]


# Published results, keyed by the default roster's class names
REFERENCE_ROWS = [
    ReferenceRow(
        scheme="joint",
        ap={"leak": 74.83, "pit": 69.87, "spot": 54.69, "orange_skin": 75.53, "convex_powder": 46.01, "chafed": 49.08},
    ),
    ReferenceRow(
        scheme="joint+fusion",
        ap={"leak": 76.07, "pit": 72.98, "spot": 62.68, "orange_skin": 76.91, "convex_powder": 46.84, "chafed": 50.82},
    ),
    ReferenceRow(
        scheme="transfer+fusion",
        ap={"leak": 76.11, "pit": 73.02, "spot": 61.97, "orange_skin": 76.85, "convex_powder": 50.23, "chafed": 52.83},
    ),
    ReferenceRow(
        scheme="transfer+fusion+reweighting",
        ap={"leak": 76.39, "pit": 73.06, "spot": 66.73, "orange_skin": 77.69, "convex_powder": 53.58, "chafed": 55.32},
    ),
    ReferenceRow(
        scheme="transfer+fusion+reweighting+metric",
        ap={"leak": 76.96, "pit": 73.09, "spot": 68.17, "orange_skin": 78.02, "convex_powder": 59.78, "chafed": 61.84},
    ),
]


class ClassAPRow(BaseModel):
    class_id: int
    name: str
    rarity: Rarity
    precision: float
    recall: float
    ap_paper: float
    ap_voc: float
    tp: int
    fp: int
    fn: int
    n_images: int
    # Set when the class has no evaluation image; the metrics are then meaningless
    no_data: bool = False


class EvalReport(BaseModel):
    rows: List[ClassAPRow]
    common_mean_ap: Optional[float]
    rare_mean_ap: Optional[float]
    score_min: float
    iou_thr: float
    corpus_hash: str
    model_fingerprint: str
    config: Dict = Field(default_factory=dict)
    reference: List[ReferenceRow] = Field(default_factory=lambda: list(REFERENCE_ROWS))

    def row(self, class_id: int) -> ClassAPRow:
        for row in self.rows:
            if row.class_id == class_id:
                return row
        raise KeyError(f"No report row for class {class_id}.")


def _mean(values: Sequence[float]) -> Optional[float]:
    return sum(values) / len(values) if values else None


def evaluate_class(
    class_id: int, images: Sequence[DefectImage], detections: Dict[str, List[Detection]], cfg: EvalConfig
) -> MatchResult:
    """Counts at the operating point, plus every prediction's outcome for the PR curve.

    Predictions of ``class_id`` on every evaluation image compete with the
    ground truth of that class only.
    """
    counts = MatchResult(0, 0, 0)
    for image in images:
        preds = [d for d in detections[image.id] if d.class_id == class_id]
        gts = image.boxes if image.class_id == class_id else []
        operating = match_detections([d for d in preds if d.score >= cfg.score_min], gts, cfg.iou_thr)
        curve = match_detections(preds, gts, cfg.iou_thr)
        counts = counts + MatchResult(operating.tp, operating.fp, operating.fn, curve.outcomes)
    return counts


def build_report(
    deployed: DeployedModel,
    eval_images: Sequence[DefectImage],
    class_specs: Sequence[DefectClassSpec],
    cfg: EvalConfig,
    corpus_hash: str = "",
    config: Optional[Dict] = None,
) -> EvalReport:
    """Detect on every evaluation image and aggregate per class, common classes first.

    Neither the model nor the images are modified.
    """
    logger = logging.getLogger("Evaluator")
    images = sorted(eval_images, key=lambda image: image.id)
    with ThreadPoolExecutor(max_workers=max(1, cfg.workers)) as executor:
        results = list(executor.map(lambda image: detect(deployed, image.pixels), images))
    detections = {image.id: result for image, result in zip(images, results)}
    logger.info(f"Detected {sum(len(r) for r in results)} defects on {len(images)} images")

    rows = []
    specs = sorted(class_specs, key=lambda spec: (spec.rarity != Rarity.common, spec.class_id))
    for spec in specs:
        n_images = sum(image.class_id == spec.class_id for image in images)
        n_gt = sum(len(image.boxes) for image in images if image.class_id == spec.class_id)
        counts = evaluate_class(spec.class_id, images, detections, cfg)
        p, r = precision(counts.tp, counts.fp), recall(counts.tp, counts.fn)
        if n_images == 0:
            logger.warning(f"Class {spec.class_id} ({spec.name}) has no evaluation image")
        rows.append(
            ClassAPRow(
                class_id=spec.class_id,
                name=spec.name,
                rarity=spec.rarity,
                precision=p,
                recall=r,
                ap_paper=ap_paper(p, r),
                ap_voc=ap_voc(counts.outcomes, n_gt),
                tp=counts.tp,
                fp=counts.fp,
                fn=counts.fn,
                n_images=n_images,
                no_data=n_images == 0,
            )
        )

    def group_mean(rarity: Rarity) -> Optional[float]:
        return _mean([row.ap_paper for row in rows if row.rarity == rarity and not row.no_data])

    return EvalReport(
        rows=rows,
        common_mean_ap=group_mean(Rarity.common),
        rare_mean_ap=group_mean(Rarity.rare),
        score_min=cfg.score_min,
        iou_thr=cfg.iou_thr,
        corpus_hash=corpus_hash,
        model_fingerprint=deployed.model.fingerprint(),
        config=config or {},
    )


def report_csv(report: EvalReport) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(REPORT_COLUMNS)
    for row in report.rows:
        values = ["" if row.no_data else f"{v:.6f}" for v in (row.precision, row.recall, row.ap_paper, row.ap_voc)]
        writer.writerow([row.class_id, row.name, row.rarity.value] + values)
    return buffer.getvalue()


def write_report(report: EvalReport, out_dir: Path, stem: str = "report") -> None:
    """Write ``<stem>.json`` and ``<stem>.csv``."""
    (out_dir / f"{stem}.json").write_text(report.model_dump_json(indent=4) + "\n")
    (out_dir / f"{stem}.csv").write_text(report_csv(report))
