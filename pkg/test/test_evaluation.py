import csv
import json

import numpy as np
import pytest

from msdd.config_models import EvalConfig
from msdd.corpus_models import Rarity
from msdd.evaluation import Baseline, compare
from msdd.evaluation.embeddings import (
    EmbeddingRow,
    class_separation,
    export_embeddings,
    project,
    top_components,
    write_embeddings,
)
from msdd.evaluation.metrics import MatchResult, ap_paper, ap_voc, match_detections, precision, recall
from msdd.evaluation.report import REFERENCE_ROWS, REPORT_COLUMNS, build_report, report_csv, write_report
from msdd.model import MSDDModel
from msdd.model.proposals import iou
from msdd.training.deploy import Detection, deploy

# -----------------------------------------------------------------------------
# Matching
# -----------------------------------------------------------------------------


def det(box, score, class_id=0):
    return Detection(tuple(float(v) for v in box), class_id, score)


def test_match_detections_hand_counts():
    gts = [(0, 0, 10, 10), (20, 20, 30, 30), (40, 40, 50, 50)]
    preds = [
        det((0, 0, 10, 10), 0.9),
        det((1, 1, 10, 10), 0.8),  # duplicate of the first ground truth
        det((21, 21, 31, 31), 0.7),
        det((60, 60, 64, 64), 0.6),
    ]
    result = match_detections(preds, gts, 0.5)
    assert (result.tp, result.fp, result.fn) == (2, 2, 1)
    assert result.outcomes == [(0.9, True), (0.8, False), (0.7, True), (0.6, False)]


def test_match_detections_iou_threshold_inclusive():
    gts = [(0, 0, 10, 10)]
    # IoU of exactly 0.5
    pred = det((0, 0, 10, 5), 0.9)
    assert iou(pred.box, gts[0]) == 0.5
    assert match_detections([pred], gts, 0.5).tp == 1
    assert match_detections([pred], gts, 0.51).tp == 0


def test_match_detections_empty():
    assert match_detections([], [(0, 0, 4, 4)]).fn == 1
    result = match_detections([det((0, 0, 4, 4), 0.5)], [])
    assert (result.tp, result.fp, result.fn) == (0, 1, 0)


def brute_force_tp(preds, gts, iou_thr):
    """Largest number of one-to-one prediction/ground-truth pairs above the threshold."""

    def best(g, used):
        if g == len(gts):
            return 0
        result = best(g + 1, used)
        for p, pred in enumerate(preds):
            if p not in used and iou(pred.box, gts[g]) >= iou_thr:
                result = max(result, 1 + best(g + 1, used | {p}))
        return result

    return best(0, frozenset())


def separated_instance(rng):
    """Up to six ground truths in distinct cells of a 3x3 grid, at least two pixels apart, and up to six predictions."""
    cells = rng.permutation(9)[: rng.integers(0, 7)]
    gts = []
    for cell in cells:
        side = int(rng.integers(6, 19))
        x = 24 * (cell % 3) + 1 + int(rng.integers(0, 23 - side))
        y = 24 * (cell // 3) + 1 + int(rng.integers(0, 23 - side))
        gts.append((x, y, x + side, y + side))
    preds = []
    for _ in range(rng.integers(0, 7)):
        if gts and rng.uniform() < 0.8:
            x1, y1, x2, y2 = gts[rng.integers(len(gts))]
            dx1, dy1, dx2, dy2 = rng.integers(-4, 5, size=4)
            box = (x1 + dx1, y1 + dy1, max(x2 + dx2, x1 + dx1 + 1), max(y2 + dy2, y1 + dy1 + 1))
        else:
            x, y = rng.integers(0, 60, size=2)
            box = (x, y, x + int(rng.integers(4, 20)), y + int(rng.integers(4, 20)))
        # Coarse scores leave ties
        preds.append(det(box, int(rng.integers(0, 4)) / 4))
    return preds, gts


@pytest.mark.parametrize("seed", range(200))
def test_greedy_matching_optimal_on_separated_ground_truth(seed):
    """Ground truths that do not touch leave every prediction at most one partner above 0.5 IoU."""
    preds, gts = separated_instance(np.random.default_rng(seed))
    result = match_detections(preds, gts, 0.5)
    assert result.tp == brute_force_tp(preds, gts, 0.5)
    assert (result.fp, result.fn) == (len(preds) - result.tp, len(gts) - result.tp)


def test_greedy_matching_on_touching_ground_truth():
    gts = [(0, 0, 10, 10), (0, 3, 10, 13)]
    preds = [det((0, 1, 10, 11), 0.9), det((0, 0, 10, 6), 0.8)]
    # The higher score claims the first ground truth and starves the second prediction
    assert match_detections(preds, gts, 0.5).tp == 1
    assert brute_force_tp(preds, gts, 0.5) == 2


def test_match_result_addition():
    total = MatchResult(1, 2, 3, [(0.5, True)]) + MatchResult(4, 5, 6, [(0.1, False)])
    assert (total.tp, total.fp, total.fn) == (5, 7, 9)
    assert total.outcomes == [(0.5, True), (0.1, False)]


# -----------------------------------------------------------------------------
# Precision, recall, AP
# -----------------------------------------------------------------------------


def test_precision_recall():
    assert precision(3, 1) == 0.75
    assert recall(3, 1) == 0.75
    assert precision(0, 0) == 0.0
    assert recall(0, 0) == 0.0


def test_ap_paper():
    assert ap_paper(0.8, 0.6) == pytest.approx(0.7)
    with pytest.raises(ValueError):
        ap_paper(1.2, 0.5)


def brute_force_ap(outcomes, n_gt):
    """Area under the interpolated curve: sum over recall steps of the best precision at or beyond."""
    ranked = sorted(outcomes, key=lambda o: -o[0])
    points = []
    tp = 0
    for k, (_, hit) in enumerate(ranked, start=1):
        tp += hit
        points.append((tp / n_gt, tp / k))
    area, previous = 0.0, 0.0
    for r, _ in points:
        if r > previous:
            area += (r - previous) * max(p for rr, p in points if rr >= r)
            previous = r
    return area


@pytest.mark.parametrize("seed", range(8))
def test_ap_voc_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 12))
    outcomes = [(float(s), bool(h)) for s, h in zip(rng.permutation(n) / n, rng.integers(0, 2, n))]
    n_gt = max(1, sum(h for _, h in outcomes) + int(rng.integers(0, 3)))
    assert ap_voc(outcomes, n_gt) == pytest.approx(brute_force_ap(outcomes, n_gt))


def test_ap_voc_known_values():
    assert ap_voc([(0.9, True), (0.8, True)], 2) == pytest.approx(1.0)
    assert ap_voc([(0.9, False), (0.8, True)], 1) == pytest.approx(0.5)
    assert ap_voc([(0.9, True)], 2) == pytest.approx(0.5)
    assert ap_voc([], 3) == 0.0
    assert ap_voc([(0.9, False)], 0) == 0.0


# -----------------------------------------------------------------------------
# Report
# -----------------------------------------------------------------------------


@pytest.fixture(scope="module")
def deployed(tiny_split, tiny_config):
    return deploy(MSDDModel(tiny_config.model), tiny_split, tiny_config.finetune)


@pytest.fixture(scope="module")
def report(deployed, tiny_split, tiny_corpus, tiny_config):
    return build_report(
        deployed, tiny_split.eval, tiny_corpus.class_specs, tiny_config.evaluation, tiny_corpus.manifest.content_hash
    )


def test_report_structure(report, tiny_config, deployed):
    rarities = [row.rarity for row in report.rows]
    assert rarities == sorted(rarities, key=lambda r: r != Rarity.common)
    assert [row.class_id for row in report.rows] == tiny_config.common_classes + tiny_config.rare_classes
    for row in report.rows:
        assert row.precision == precision(row.tp, row.fp)
        assert row.recall == recall(row.tp, row.fn)
        assert row.ap_paper == pytest.approx((row.precision + row.recall) / 2)
        assert 0.0 <= row.ap_voc <= 1.0
        assert not row.no_data and row.n_images > 0
    assert report.model_fingerprint == deployed.model.fingerprint()
    assert report.reference == REFERENCE_ROWS
    common = [row.ap_paper for row in report.rows if row.rarity == Rarity.common]
    assert report.common_mean_ap == pytest.approx(sum(common) / len(common))


def test_report_false_negatives_cover_ground_truth(report, tiny_split):
    for row in report.rows:
        n_gt = sum(len(image.boxes) for image in tiny_split.eval if image.class_id == row.class_id)
        assert row.tp + row.fn == n_gt


def test_report_independent_of_workers(deployed, tiny_split, tiny_corpus, report):
    single = build_report(deployed, tiny_split.eval, tiny_corpus.class_specs, EvalConfig(workers=1))
    assert [row.model_dump() for row in single.rows] == [row.model_dump() for row in report.rows]


def test_report_marks_classes_without_data(deployed, tiny_split, tiny_corpus, tiny_config):
    common_only = [image for image in tiny_split.eval if image.class_id in tiny_config.common_classes]
    partial = build_report(deployed, common_only, tiny_corpus.class_specs, tiny_config.evaluation)
    for class_id in tiny_config.rare_classes:
        assert partial.row(class_id).no_data
    assert partial.rare_mean_ap is None
    lines = report_csv(partial).splitlines()
    assert lines[-1].endswith(",,,,")


def test_write_report(report, tmp_path):
    write_report(report, tmp_path)
    payload = json.loads((tmp_path / "report.json").read_text())
    assert len(payload["rows"]) == len(report.rows)
    with open(tmp_path / "report.csv") as file:
        rows = list(csv.reader(file))
    assert rows[0] == REPORT_COLUMNS
    assert len(rows) == len(report.rows) + 1
    assert all(len(value.split(".")[1]) == 6 for value in rows[1][3:])


def test_baseline_comparison(report):
    comparison = compare(report, report, Baseline.joint)
    assert comparison.rare_gain == pytest.approx(0.0)
    assert "rare_gain" in json.loads(comparison.model_dump_json())


# -----------------------------------------------------------------------------
# Embeddings
# -----------------------------------------------------------------------------


def test_top_components_match_eigh():
    rng = np.random.default_rng(0)
    data = rng.standard_normal((40, 5)) @ np.diag([5.0, 3.0, 1.0, 0.5, 0.1])
    values, vectors = top_components(data, k=2)

    centered = data - data.mean(axis=0)
    expected_values, expected_vectors = np.linalg.eigh(centered.T @ centered / (len(data) - 1))
    np.testing.assert_allclose(values, expected_values[::-1][:2], rtol=1e-6)
    for k in range(2):
        expected = expected_vectors[:, -1 - k]
        assert abs(float(vectors[k] @ expected)) == pytest.approx(1.0, abs=1e-6)
        assert vectors[k][np.argmax(np.abs(vectors[k]))] > 0


def test_project_pads_low_dimensional_data():
    coords = project(np.array([[0.0], [1.0], [2.0]]))
    assert coords.shape == (3, 2)
    np.testing.assert_allclose(np.abs(coords[:, 0]), [1.0, 0.0, 1.0])
    np.testing.assert_array_equal(coords[:, 1], 0.0)


def test_class_separation():
    rows = [
        EmbeddingRow(0, False, np.array([0.0, 0.0])),
        EmbeddingRow(0, False, np.array([0.0, 1.0])),
        EmbeddingRow(1, False, np.array([3.0, 0.0])),
        EmbeddingRow(1, True, np.array([9.0, 9.0])),
    ]
    intra, inter = class_separation(rows)
    assert intra == pytest.approx(1.0)
    assert inter == pytest.approx((3.0 + np.sqrt(10.0)) / 2)
    with pytest.raises(ValueError):
        class_separation(rows[:2])


def test_export_embeddings(deployed, tiny_split, tmp_path):
    rows = export_embeddings(deployed, tiny_split.eval)
    samples = [row for row in rows if not row.is_prototype]
    assert len(samples) == sum(len(image.boxes) for image in tiny_split.eval)
    prototypes = [row for row in rows if row.is_prototype]
    assert [row.class_id for row in prototypes] == deployed.bank.class_ids
    dim = deployed.model.cfg.embedding_dim
    assert all(row.vector.shape == (dim,) for row in rows)

    path = tmp_path / "embeddings.csv"
    write_embeddings(rows, path)
    with open(path) as file:
        table = list(csv.reader(file))
    assert table[0][:4] == ["class_id", "is_prototype", "pca_x", "pca_y"]
    assert len(table[0]) == 4 + dim
    assert len(table) == len(rows) + 1


# -----------------------------------------------------------------------------
# Default configuration
# -----------------------------------------------------------------------------


def default_report(run, deployed):
    return build_report(deployed, run.split.eval, run.corpus.class_specs, run.config.evaluation)


@pytest.mark.slow
def test_two_phase_beats_joint_baseline_on_rare_classes(default_run):
    report = default_report(default_run, default_run.finetuned)
    comparison = compare(report, default_report(default_run, default_run.joint), Baseline.joint)
    assert comparison.rare_gain is not None
    assert comparison.rare_gain >= 0.05


@pytest.mark.slow
def test_finetuning_beats_prototypes_alone_on_rare_classes(default_run):
    finetuned = default_report(default_run, default_run.finetuned)
    bolted = default_report(default_run, default_run.bolted)
    assert finetuned.rare_mean_ap > bolted.rare_mean_ap


@pytest.mark.slow
def test_base_embeddings_separate_common_classes(default_run):
    split = default_run.split
    held_out = [image for image in split.eval if image.class_id in split.common_classes]
    intra, inter = class_separation(export_embeddings(default_run.bolted, held_out))
    assert intra < inter
