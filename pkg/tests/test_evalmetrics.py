import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dgmask.evalmetrics import (
    IOU_THRESHOLDS,
    Detection,
    GroundTruth,
    MetricsReport,
    _category_ap,
    average_precision,
    emit_csv,
    emit_report,
    evaluate,
    mask_iou,
    read_report,
    report_json,
)

GOLDEN = Path(__file__).parent / "data" / "golden_report.json"


def block(shape, y0, y1, x0, x1):
    m = np.zeros(shape, dtype=bool)
    m[y0:y1, x0:x1] = True
    return m


def test_mask_iou_cases():
    a = block((6, 6), 0, 2, 0, 4)
    assert mask_iou(a, a) == 1
    assert mask_iou(a, block((6, 6), 3, 5, 0, 4)) == 0
    assert mask_iou(a, block((6, 6), 1, 3, 0, 4)) == pytest.approx(1 / 3)
    assert mask_iou(np.zeros((3, 3)), np.zeros((3, 3))) == 1
    with pytest.raises(ValueError):
        mask_iou(np.zeros((3, 3)), np.zeros((3, 4)))


@given(st.integers(0, 2**32 - 1))
def test_mask_iou_symmetric(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.uniform(size=(2, 5, 5)) < 0.4
    assert mask_iou(a, b) == mask_iou(b, a)


def fixture_single_perfect():
    gt = block((10, 10), 2, 6, 2, 6)
    return [Detection("a", 1, 0.9, gt)], [GroundTruth("a", 1, gt)]


def fixture_staircase():
    """Two ground truths: one perfect detection, one at IoU exactly 0.6."""
    g1 = block((10, 10), 0, 2, 0, 5)
    g2 = block((10, 10), 5, 7, 0, 5)
    d2 = block((10, 10), 5, 7, 0, 3)  # 6 of 10 pixels
    assert mask_iou(d2, g2) == 0.6
    return ([Detection("a", 1, 0.9, g1), Detection("a", 1, 0.8, d2)],
            [GroundTruth("a", 1, g1), GroundTruth("a", 1, g2)])


def fixture_false_positive_first():
    gt = block((10, 10), 2, 6, 2, 6)
    miss = block((10, 10), 7, 9, 7, 9)
    return [Detection("a", 1, 0.95, miss), Detection("a", 1, 0.5, gt)], [GroundTruth("a", 1, gt)]


def expected_staircase():
    # IoU 0.6 counts at thresholds 0.50, 0.55, 0.60 (precision 1 at every recall).
    # Above that the PR staircase is precision 1 up to recall 0.5, then nothing:
    # 51 of the 101 recall points (0.00 .. 0.50) score 1.
    high = 51 / 101
    return (3 * 1.0 + 7 * high) / 10, 1.0, high


def test_ap_hand_fixtures():
    assert average_precision(*fixture_single_perfect()) == (1.0, 1.0, 1.0)
    assert average_precision(*fixture_staircase()) == pytest.approx(expected_staircase(),
                                                                     abs=1e-15)
    # precision at recall 1 is 1/2 and interpolation carries it back to recall 0
    assert average_precision(*fixture_false_positive_first()) == pytest.approx((0.5, 0.5, 0.5),
                                                                                abs=1e-15)


def test_ap_no_predictions_and_no_ground_truth():
    _, gts = fixture_single_perfect()
    assert average_precision([], gts) == (0.0, 0.0, 0.0)
    dets, _ = fixture_single_perfect()
    assert average_precision(dets, []) == (0.0, 0.0, 0.0)


def test_detection_in_other_image_does_not_match():
    dets, gts = fixture_single_perfect()
    moved = [Detection("b", 1, 0.9, dets[0].mask)]
    assert average_precision(moved, gts) == (0.0, 0.0, 0.0)


def test_categories_are_averaged():
    d1, g1 = fixture_single_perfect()
    d2, g2 = fixture_false_positive_first()
    d2 = [Detection("b", 2, d.score, d.mask) for d in d2]
    g2 = [GroundTruth("b", 2, g.mask) for g in g2]
    assert average_precision(d1 + d2, g1 + g2) == pytest.approx((0.75, 0.75, 0.75))


def random_set(rng):
    """Disjoint ground truths (one per image) and jittered detections."""
    dets, gts = [], []
    for k in range(int(rng.integers(1, 6))):
        image = f"im{k}"
        y, x = rng.integers(0, 6, size=2)
        g = block((12, 12), y, y + 6, x, x + 6)
        gts.append(GroundTruth(image, int(rng.integers(1, 3)), g))
        for _ in range(int(rng.integers(0, 3))):
            dy, dx = rng.integers(-2, 3, size=2)
            d = block((12, 12), max(y + dy, 0), y + dy + 6, max(x + dx, 0), x + dx + 6)
            dets.append(Detection(image, gts[-1].category, float(rng.uniform()), d))
    return dets, gts


def test_ap_orderings_on_random_sets():
    rng = np.random.default_rng(8)
    for _ in range(100):
        dets, gts = random_set(rng)
        ap, ap50, ap75 = average_precision(dets, gts)
        assert 0 <= ap75 <= ap50 <= 1 and ap <= ap50
        # precision at each threshold can only drop as the threshold rises,
        # so the six thresholds up to 0.75 bound AP from below
        assert ap >= 0.6 * ap75 - 1e-12
        for c in {g.category for g in gts}:
            per = _category_ap([d for d in dets if d.category == c],
                               [g for g in gts if g.category == c], IOU_THRESHOLDS)
            assert np.all(np.diff(per) <= 1e-12)


@settings(max_examples=50)
@given(st.integers(0, 2**32 - 1), st.sampled_from(["cube", "exp", "affine"]))
def test_ap_invariant_to_monotone_score_transform(seed, kind):
    rng = np.random.default_rng(seed)
    dets, gts = random_set(rng)
    f = {"cube": lambda s: s**3, "exp": np.exp, "affine": lambda s: 3 * s - 7}[kind]
    moved = [Detection(d.image, d.category, float(f(d.score)), d.mask) for d in dets]
    assert average_precision(moved, gts) == average_precision(dets, gts)


def sample_report():
    return MetricsReport(
        scenes=[{"name": "scene_0000", "ious": [1.0, 0.5],
                 "trace": [{"step": 0, "phase": "base", "total": 1.25}]},
                {"name": "scene_0001", "ious": [], "trace": []}],
        ap=0.65, ap50=1.0, ap75=0.5, config={"gamma": 4.0, "tau_d": 0.5}, seeds=[7],
        wall_clock=None)


def test_report_round_trip(tmp_path):
    r = sample_report()
    emit_report(r, tmp_path / "m.json")
    assert read_report(tmp_path / "m.json") == r
    assert r.mean_iou() == pytest.approx(0.75)


def test_empty_report_is_valid_json(tmp_path):
    emit_report(MetricsReport(), tmp_path / "m.json")
    doc = json.loads((tmp_path / "m.json").read_text())
    assert doc["scenes"] == [] and doc["seeds"] == []
    assert doc["AP"] == 0.0


def test_report_matches_golden_file():
    assert report_json(sample_report()) == GOLDEN.read_text()


def test_csv_summary(tmp_path):
    emit_csv(sample_report(), tmp_path / "m.csv")
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines[0] == "scene,instance,iou"
    assert lines[1] == "scene_0000,0,1.000000"
    assert lines[-3].startswith("AP,")


def test_evaluate_end_to_end():
    g = block((8, 8), 1, 5, 1, 5)
    prob = np.where(g, 0.9, 0.1)
    report = evaluate(["s"], [[prob]], [[g]], [[1]], seeds=[3])
    assert report.scenes[0]["ious"] == [1.0]
    assert (report.ap, report.ap50, report.ap75) == (1.0, 1.0, 1.0)
    assert report.seeds == [3]
