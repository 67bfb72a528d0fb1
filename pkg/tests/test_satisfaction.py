from fractions import Fraction

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import frac_iou, oracle_map
from smrkit.records import ClassificationPrediction, Detection
from smrkit.satisfaction import (
    COCO_IOU_GRID,
    DetectionScoringConfig,
    GroundTruthBox,
    average_precision,
    filter_pseudo_gt,
    iou,
    score_classification,
    score_detection,
)

CP = ClassificationPrediction
CAT, DOG, BIRD = 1, 2, 3


def test_classification_identity():
    p = CP((CAT, DOG, BIRD))
    assert score_classification(p, p, 1).value == 1.0


def test_classification_topk_membership():
    compressed = CP((DOG, CAT))
    original = CP((CAT, DOG, BIRD))
    assert score_classification(compressed, original, 3).value == 1.0
    assert score_classification(compressed, original, 1).value == 0.0


def test_classification_k_too_deep():
    with pytest.raises(ValueError, match="exceeds"):
        score_classification(CP((1,)), CP((1, 2)), 3)
    with pytest.raises(ValueError):
        score_classification(CP((1,)), CP((1, 2)), 0)


rankings = st.lists(st.integers(0, 9), min_size=5, max_size=5, unique=True).map(lambda r: CP(tuple(r)))


@given(rankings, rankings, st.integers(1, 5), st.integers(1, 5))
def test_classification_monotone_in_k(a, b, k1, k2):
    k1, k2 = sorted((k1, k2))
    assert score_classification(a, b, k1).value <= score_classification(a, b, k2).value
    assert score_classification(a, a, k1).value == 1.0


# --- IOU ---------------------------------------------------------------------


def test_iou_examples():
    assert iou((0, 0, 10, 10), (0, 0, 10, 10)) == 1.0
    assert iou((0, 0, 10, 10), (20, 20, 5, 5)) == 0.0
    assert iou((0, 0, 10, 10), (10, 0, 10, 10)) == 0.0  # touching edges, half-open
    assert iou((0, 0, 10, 10), (5, 0, 10, 10)) == pytest.approx(1 / 3, abs=1e-15)


boxes = st.tuples(
    st.integers(0, 20), st.integers(0, 20), st.integers(1, 15), st.integers(1, 15)
).map(lambda t: tuple(float(v) for v in t))


@given(boxes, boxes)
def test_iou_properties(a, b):
    v = iou(a, b)
    assert 0.0 <= v <= 1.0
    assert v == iou(b, a)
    assert iou(a, a) == 1.0
    assert v == pytest.approx(float(frac_iou(a, b)), abs=1e-15)


# --- pseudo-GT and AP --------------------------------------------------------


def D(box, cat=0, conf=0.9):
    return Detection(tuple(float(v) for v in box), cat, conf)


def test_filter_pseudo_gt():
    dets = [D((0, 0, 5, 5), conf=0.9), D((1, 1, 5, 5), conf=0.2)]
    assert len(filter_pseudo_gt(dets, 0.3)) == 1
    assert filter_pseudo_gt([D((0, 0, 5, 5), conf=0.1)], 0.3) == []
    # strict inequality
    assert filter_pseudo_gt([D((0, 0, 5, 5), conf=0.3)], 0.3) == []
    assert DetectionScoringConfig().conf_threshold == 0.3


def test_iou_grid_default():
    assert COCO_IOU_GRID == (0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95)


def test_ap_single_match():
    gt = [GroundTruthBox((0, 0, 10, 10), 0)]
    assert average_precision([D((0, 0, 10, 10))], gt, 0.5) == 1.0


def test_ap_miss_then_hit():
    gt = [GroundTruthBox((0, 0, 10, 10), 0)]
    dets = [D((50, 50, 10, 10), conf=0.9), D((0, 0, 10, 10), conf=0.8)]
    assert average_precision(dets, gt, 0.5) == 0.5
    ref = oracle_map([(d.bbox, d.category, d.confidence) for d in dets], [((0, 0, 10, 10), 0, 0.9)], [0.5], 0.3, exhaustive=True)
    assert ref == Fraction(1, 2)


def test_ap_empty_dets():
    assert average_precision([], [GroundTruthBox((0, 0, 10, 10), 0)], 0.5) == 0.0


def test_ap_ignores_gt_less_categories():
    gt = [GroundTruthBox((0, 0, 10, 10), 0)]
    dets = [D((0, 0, 10, 10), cat=0, conf=0.5), D((30, 30, 5, 5), cat=7, conf=0.99)]
    assert average_precision(dets, gt, 0.5) == 1.0
    s = score_detection(dets, [D((0, 0, 10, 10), cat=0, conf=0.9)])
    assert s.ignored_categories == (7,)


def test_score_detection_self_consistency():
    original = [D((0, 0, 10, 10), 0, 0.9), D((20, 20, 8, 8), 1, 0.8), D((2, 2, 6, 6), 0, 0.1)]
    filtered = [D(d.bbox, d.category, d.confidence) for d in original if d.confidence > 0.3]
    assert score_detection(filtered, original).value == 1.0
    assert score_detection(original, original).value == 1.0


def test_score_detection_empty_compressed():
    assert score_detection([], [D((0, 0, 10, 10))]).value == 0.0


def test_score_detection_vacuous():
    s = score_detection([D((0, 0, 10, 10))], [D((0, 0, 10, 10), conf=0.2)])
    assert s.value == 1.0 and s.vacuous


def test_score_detection_iou_07():
    # (0,0,10,10) vs (0,0,10,7): IOU exactly 0.7 -> matches at 0.50..0.70 only
    gt_box, det_box = (0, 0, 10, 10), (0, 0, 10, 7)
    assert frac_iou(gt_box, det_box) == Fraction(7, 10)
    s = score_detection([D(det_box)], [D(gt_box)])
    assert s.value == 0.5
    per_threshold = [average_precision([D(det_box)], [GroundTruthBox(gt_box, 0)], t) for t in COCO_IOU_GRID]
    assert per_threshold == [1.0] * 5 + [0.0] * 5


def test_greedy_tie_break_prefers_highest_iou_then_lowest_index():
    gts = [GroundTruthBox((0, 0, 10, 10), 0), GroundTruthBox((0, 0, 10, 10), 0)]
    # one det matches either GT equally; the second identical det takes the other
    dets = [D((0, 0, 10, 10), conf=0.9), D((0, 0, 10, 10), conf=0.9)]
    assert average_precision(dets, gts, 0.5) == 1.0


def test_config_validation():
    with pytest.raises(ValueError):
        DetectionScoringConfig(iou_thresholds=())
    with pytest.raises(ValueError):
        DetectionScoringConfig(iou_thresholds=(0.6, 0.5))
    with pytest.raises(ValueError):
        DetectionScoringConfig(conf_threshold=0.0)


# --- oracle equivalence (property) -------------------------------------------

small_box = st.tuples(st.integers(0, 6), st.integers(0, 6), st.integers(1, 6), st.integers(1, 6))
conf = st.sampled_from([0.1, 0.25, 0.3, 0.4, 0.5, 0.7, 0.9])
det_tuple = st.tuples(small_box, st.integers(0, 1), conf)


@settings(max_examples=300)
@given(st.lists(det_tuple, max_size=5), st.lists(det_tuple, max_size=3))
def test_map_matches_exhaustive_oracle(compressed, original):
    comp = [D(b, c, p) for b, c, p in compressed]
    orig = [D(b, c, p) for b, c, p in original]
    got = score_detection(comp, orig)
    ref = oracle_map(compressed, original, COCO_IOU_GRID, 0.3, exhaustive=True)
    if ref is None:
        assert got.vacuous and got.value == 1.0
    else:
        assert abs(got.value - float(ref)) <= 1e-12
        assert ref == oracle_map(compressed, original, COCO_IOU_GRID, 0.3)


@given(st.lists(det_tuple, max_size=5), st.lists(det_tuple, min_size=1, max_size=3))
def test_map_non_increasing_in_iou_threshold(compressed, original):
    comp = [D(b, c, p) for b, c, p in compressed]
    gt = [GroundTruthBox(tuple(float(v) for v in b), c) for b, c, _ in original]
    values = [average_precision(comp, gt, t) for t in COCO_IOU_GRID]
    assert all(b <= a + 1e-15 for a, b in zip(values, values[1:]))
