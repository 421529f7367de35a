import math
from fractions import Fraction

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from stmg.detection import (Detections, HeadConfig, active_region_pool, assign_targets, average_precision,
                            decode_box, detect, detections_to_csv, encode_box, evaluate_map, iou,
                            iou_matrix, nms, parse_detections)
from stmg.errors import DataError
from stmg.events import GEN1, GroundTruth

GT_BOX = [50.0, 50.0, 20.0, 10.0]
FAR = [250.0, 200.0, 20.0, 10.0]


def test_encode_examples():
    enc = encode_box(np.array([110.0, 0, 32, 64]), np.array([100.0, 0]))
    assert enc[0] == pytest.approx(0.15625)
    assert enc[2] == pytest.approx(math.log(0.5))
    assert enc[2] == pytest.approx(-0.693147, abs=1e-6)
    assert enc[3] == pytest.approx(0.0)


def test_decode_inverse_example():
    out = decode_box(np.array([0, 0, math.log(2), 0]), np.array([10.0, 10.0]))
    assert out[2] == pytest.approx(128.0)


@given(st.floats(0, 300), st.floats(0, 240), st.floats(1, 200), st.floats(1, 200),
       st.floats(0, 303), st.floats(0, 239))
@settings(max_examples=100, deadline=None)
def test_encode_decode_roundtrip(cx, cy, w, h, px, py):
    gt = np.array([cx, cy, w, h])
    back = decode_box(encode_box(gt, np.array([px, py])), np.array([px, py]))
    np.testing.assert_allclose(back, gt, rtol=1e-9, atol=1e-9)


def test_decode_torch_matches_numpy():
    pred = np.random.default_rng(0).standard_normal((5, 4))
    pos = np.random.default_rng(1).random((5, 2)) * 100
    a = decode_box(pred, pos, geometry=GEN1)
    b = decode_box(torch.as_tensor(pred), torch.as_tensor(pos), geometry=GEN1).numpy()
    np.testing.assert_allclose(a, b)


def test_iou_half_offset_squares():
    assert iou([0.5, 0.5, 1, 1], [1.0, 0.5, 1, 1]) == pytest.approx(1 / 3)


@given(st.lists(st.tuples(st.floats(0, 100), st.floats(0, 100), st.floats(0.5, 50), st.floats(0.5, 50)),
                min_size=1, max_size=6))
@settings(max_examples=50, deadline=None)
def test_iou_matrix_properties(boxes):
    b = np.array(boxes)
    m = iou_matrix(b, b)
    np.testing.assert_allclose(np.diag(m), 1.0)
    np.testing.assert_allclose(m, m.T)
    assert np.all((m >= 0) & (m <= 1 + 1e-12))


def test_nms_greedy_chain():
    # A overlaps B, B overlaps C, A and C disjoint
    boxes = [[10, 10, 10, 10], [14, 10, 10, 10], [18, 10, 10, 10]]
    d = Detections(boxes, [0.9, 0.8, 0.7], [0, 0, 0], [0, 1, 2])
    kept = nms(d, 0.3)
    assert kept.node_ids.tolist() == [0, 2]


def test_nms_is_per_class():
    d = Detections([[10, 10, 10, 10], [10, 10, 10, 10]], [0.9, 0.8], [0, 1], [0, 1])
    assert len(nms(d, 0.5)) == 2


def test_nms_ties_by_node_id():
    d = Detections([[10, 10, 10, 10], [10, 10, 10, 10]], [0.5, 0.5], [0, 0], [7, 3])
    assert nms(d, 0.5).node_ids.tolist() == [3]


def test_pool_keeps_best_and_anchors_at_mean():
    pos = np.array([[0.0, 0.0], [1.0, 1.0], [5.0, 5.0]])
    pooled = active_region_pool(pos, np.array([0.2, 0.9, 0.5]), np.arange(3), 2)
    assert sorted(pooled.rows.tolist()) == [1, 2]
    i = pooled.rows.tolist().index(1)
    np.testing.assert_allclose(pooled.pos[i], [0.5, 0.5])


def test_detect_pipeline_thresholds():
    probs = np.array([[0.9, 0.05, 0.05], [0.05, 0.05, 0.9]])
    d = detect(probs, np.zeros((2, 4)), np.ones(2), np.array([[100.0, 100.0], [10.0, 10.0]]),
               np.arange(2), HeadConfig(pool_voxel=2))
    assert len(d) == 1 and d.classes[0] == 0
    np.testing.assert_allclose(d.boxes[0], [100, 100, 64, 64])


def test_assign_targets_nearest_label_and_smallest_box():
    gt = GroundTruth([[10_000, 0, 50, 50, 40, 40], [10_000, 1, 50, 50, 10, 10], [30_000, 1, 200, 200, 10, 10]])
    tg = assign_targets([50, 60, 200, 50], [50, 60, 200, 50], [9_000, 11_000, 25_000, 19_999], gt, 2)
    assert tg.labels.tolist() == [1, 0, 1, 1]
    np.testing.assert_allclose(tg.boxes[0], [50, 50, 10, 10])
    assert tg.positive.tolist() == [True, True, True, True]
    # equidistant between 10 ms and 30 ms: goes to the later label, where (50,50) is background
    assert assign_targets([50], [50], [20_000], gt, 2).labels.tolist() == [2]


def test_assign_rejects_bad_class():
    with pytest.raises(DataError):
        assign_targets([1], [1], [0], GroundTruth([[0, 5, 1, 1, 2, 2]]), 2)


def _scenario(kinds, n_gt=1):
    """kinds: 'tp'/'fp' in descending score order, one label frame."""
    gts = [[1000, 0, 30.0 * (k + 1), 50, 20, 10] for k in range(n_gt)]
    boxes, k = [], 0
    for kind in kinds:
        if kind == "tp":
            boxes.append(gts[k][2:])
            k += 1
        else:
            boxes.append(FAR)
    scores = np.linspace(0.9, 0.1, len(kinds)) if kinds else []
    return {1000: Detections(boxes, scores, [0] * len(kinds))}, GroundTruth(gts)


HAND_AP = [
    (["tp", "fp"], 1, Fraction(1)),
    (["fp", "tp"], 1, Fraction(1, 2)),
    (["tp"], 2, Fraction(51, 101)),
    (["tp", "fp", "tp"], 2, Fraction(253, 303)),
    (["fp", "tp", "fp", "tp"], 3, Fraction(67, 202)),
    ([], 2, Fraction(0)),
]


@pytest.mark.parametrize("kinds,n_gt,expected", HAND_AP)
def test_hand_traced_ap(kinds, n_gt, expected):
    dets, gt = _scenario(kinds, n_gt)
    res = evaluate_map(dets, gt, iou_thresholds=[0.5])
    assert res.map50 == pytest.approx(float(expected), abs=1e-12)


def test_iou_threshold_sweep():
    # IoU exactly 0.6: a TP at thresholds .50, .55, .60 only
    gt = GroundTruth([[0, 0, 5, 5, 10, 10]])
    dets = {0: Detections([[7.5, 5, 10, 10]], [0.9], [0])}
    res = evaluate_map(dets, gt)
    assert res.map50 == 1.0
    assert res.map == pytest.approx(0.3)


def test_perfect_and_empty():
    gt = GroundTruth([[0, 0, 5, 5, 10, 10], [0, 1, 50, 50, 10, 10]])
    perfect = {0: Detections(gt.boxes[:, 2:], [0.9, 0.8], [0, 1])}
    assert evaluate_map(perfect, gt).map == 1.0
    assert evaluate_map({}, gt).map == 0.0


def test_average_precision_direct():
    assert average_precision(np.array([True, False, True]), 2) == pytest.approx(253 / 303)


def test_detection_csv_roundtrip():
    dets = {33333: Detections([[1.5, 2.25, 3, 4], [10, 20, 30, 40]], [0.5, 0.25], [0, 1])}
    text = detections_to_csv(dets)
    assert detections_to_csv(parse_detections(text)) == text


def test_detection_csv_rejects_bad_lines():
    with pytest.raises(DataError):
        parse_detections("1,0,0.5,1,2,3\n")
    with pytest.raises(DataError):
        parse_detections("1,0,0.5,1,2,-3,4\n")
