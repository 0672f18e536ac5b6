import math
from fractions import Fraction

import numpy as np
import pytest

from rapbench.metrics import (
    Detection, average_precision, iou, iou_matrix, nms, nms_indices,
    psnr_for_output, psnr_luminance, recall_at,
)


def iou_fraction_oracle(a, b):
    """Exact rational IoU via inclusion-exclusion on corner intervals."""
    ax, ay, aw, ah = (Fraction(v) for v in a)
    bx, by, bw, bh = (Fraction(v) for v in b)
    iw = min(ax + aw / 2, bx + bw / 2) - max(ax - aw / 2, bx - bw / 2)
    ih = min(ay + ah / 2, by + bh / 2) - max(ay - ah / 2, by - bh / 2)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = aw * ah + bw * bh - inter
    if union <= 0:
        return 0.0
    return float(inter / union)


def nms_loop_oracle(boxes, scores, thr):
    """Plain-loop greedy suppression over scalar IoUs."""
    n = len(scores)
    order = sorted(range(n), key=lambda i: (-scores[i], i))
    kept = []
    for i in order:
        if all(iou(tuple(boxes[i]), tuple(boxes[j])) <= thr for j in kept):
            kept.append(i)
    return kept


def random_boxes(rng, n):
    """Boxes on a quarter-pixel grid so float arithmetic stays exact."""
    x = rng.integers(0, 512, size=n) / 4.0
    y = rng.integers(0, 512, size=n) / 4.0
    w = rng.integers(1, 256, size=n) / 4.0
    h = rng.integers(1, 256, size=n) / 4.0
    return np.stack([x, y, w, h], axis=1)


def test_iou_identical_boxes():
    assert iou((3.0, 4.0, 2.0, 5.0), (3.0, 4.0, 2.0, 5.0)) == 1.0


def test_iou_disjoint_boxes():
    assert iou((0.0, 0.0, 2.0, 2.0), (10.0, 10.0, 2.0, 2.0)) == 0.0


def test_iou_one_third_case():
    # overlap area 2, union 6
    assert iou((0.0, 0.0, 2.0, 2.0), (1.0, 0.0, 2.0, 2.0)) == pytest.approx(1 / 3, abs=0)


def test_iou_matches_fraction_oracle_exactly():
    # the acceptance suite runs the full 10,000-pair sweep; keep this quick
    rng = np.random.default_rng(100)
    a = random_boxes(rng, 2000)
    b = random_boxes(rng, 2000)
    mat = iou_matrix(a, b)
    for i in range(2000):
        want = iou_fraction_oracle(a[i], b[i])
        assert iou(tuple(a[i]), tuple(b[i])) == want
        assert mat[i, i] == want


def test_iou_symmetry_and_translation():
    rng = np.random.default_rng(101)
    a = random_boxes(rng, 200)
    b = random_boxes(rng, 200)
    for i in range(200):
        pa, pb = tuple(a[i]), tuple(b[i])
        assert iou(pa, pb) == iou(pb, pa)
        assert iou(pa, pa) == 1.0
        shifted_a = (pa[0] + 13.0, pa[1] - 7.0, pa[2], pa[3])
        shifted_b = (pb[0] + 13.0, pb[1] - 7.0, pb[2], pb[3])
        assert iou(shifted_a, shifted_b) == pytest.approx(iou(pa, pb), rel=1e-12)


def test_psnr_identical_images_is_inf_sentinel():
    img = np.full((4, 4, 3), 12.0)
    value = psnr_luminance(img, img)
    assert math.isinf(value)
    assert psnr_for_output(value) == 999.0


def test_psnr_uniform_offsets_closed_form():
    img = np.full((8, 8, 3), 100.0)
    # +1 on all channels shifts luminance by exactly 1 -> MSE 1
    got = psnr_luminance(img, img + 1.0)
    assert got == pytest.approx(20.0 * math.log10(255.0), abs=1e-9)
    # offset 255 -> MSE 255^2 -> 0 dB
    zero = np.zeros((8, 8, 3))
    assert psnr_luminance(zero, zero + 255.0) == pytest.approx(0.0, abs=1e-9)


def test_psnr_monotone_in_offset():
    img = np.full((8, 8, 3), 60.0)
    values = [psnr_luminance(img, img + off) for off in (0.5, 1.0, 2.0, 5.0, 20.0)]
    assert all(a > b for a, b in zip(values, values[1:]))


def test_psnr_shape_mismatch_rejected():
    with pytest.raises(ValueError, match="shape"):
        psnr_luminance(np.zeros((2, 2, 3)), np.zeros((3, 2, 3)))


def test_nms_single_detection_unchanged():
    d = [Detection((1.0, 1.0, 2.0, 2.0), 0.4)]
    assert nms(d) == d


def test_nms_identical_boxes_keeps_higher_score():
    box = (5.0, 5.0, 4.0, 4.0)
    dets = [Detection(box, 0.8), Detection(box, 0.9)]
    assert nms(dets) == [Detection(box, 0.9)]


def test_nms_chain_keeps_first_and_third():
    # pairwise IoU: (a,b) and (b,c) above threshold, (a,c) below
    a = (0.0, 0.0, 10.0, 10.0)
    b = (2.0, 0.0, 10.0, 10.0)
    c = (4.0, 0.0, 10.0, 10.0)
    assert iou(a, b) > 0.5 and iou(b, c) > 0.5 and iou(a, c) < 0.5
    dets = [Detection(a, 0.9), Detection(b, 0.8), Detection(c, 0.7)]
    assert nms(dets, 0.5) == [Detection(a, 0.9), Detection(c, 0.7)]


def test_nms_matches_loop_oracle():
    rng = np.random.default_rng(102)
    for _ in range(1000):
        n = int(rng.integers(1, 9))
        boxes = np.stack([
            rng.integers(0, 16, size=n) * 1.0,
            rng.integers(0, 16, size=n) * 1.0,
            rng.integers(2, 12, size=n) * 1.0,
            rng.integers(2, 12, size=n) * 1.0,
        ], axis=1)
        scores = rng.integers(0, 10, size=n) / 10.0  # force ties sometimes
        thr = float(rng.choice([0.3, 0.5, 0.7]))
        assert nms_indices(boxes, scores, thr) == nms_loop_oracle(boxes, scores, thr)


def test_nms_threshold_validated():
    with pytest.raises(ValueError, match="threshold"):
        nms_indices(np.zeros((1, 4)), np.zeros(1), 0.0)


def test_ap_perfect_detections():
    truths = [[(2.0, 2.0, 2.0, 2.0)], [(5.0, 5.0, 3.0, 3.0), (1.0, 1.0, 1.0, 1.0)]]
    dets = [[(t, 1.0) for t in scene] for scene in truths]
    assert average_precision(dets, truths, 0.5) == 1.0


def test_ap_no_detections_is_zero():
    truths = [[(2.0, 2.0, 2.0, 2.0)]]
    assert average_precision([[]], truths, 0.5) == 0.0


def test_ap_hand_enumerated_tp_fp_orders():
    truth = (4.0, 4.0, 4.0, 4.0)
    far = (20.0, 20.0, 4.0, 4.0)
    truths = [[truth]]
    # TP scored above FP: PR points (1, 1), (1, 0.5) -> AP 1.0
    assert average_precision([[(truth, 0.9), (far, 0.8)]], truths, 0.5) == 1.0
    # FP scored above TP: PR points (0, 0), (1, 0.5) -> AP 0.5
    assert average_precision([[(truth, 0.8), (far, 0.9)]], truths, 0.5) == 0.5


def test_ap_duplicates_count_as_false_positives():
    truth = (4.0, 4.0, 4.0, 4.0)
    truths = [[truth]]
    dets = [[(truth, 0.9), (truth, 0.8)]]
    # second hit on the same truth is a FP but the envelope keeps AP at 1
    assert average_precision(dets, truths, 0.5) == 1.0
    # a lone duplicate above the TP costs precision at recall 1
    dets = [[(truth, 0.8), (truth, 0.9)]]
    assert average_precision(dets, truths, 0.5) == 1.0  # same scene: both match attempts hit the one truth


def test_ap_low_scored_disjoint_fp_never_increases_ap():
    rng = np.random.default_rng(103)
    truths = [[(8.0, 8.0, 4.0, 4.0), (20.0, 20.0, 6.0, 6.0)]]
    dets = [[((8.0, 8.0, 4.0, 4.0), 0.9), ((40.0, 40.0, 2.0, 2.0), 0.5)]]
    base = average_precision(dets, truths, 0.5)
    for _ in range(20):
        score = float(rng.uniform(0.0, 0.4))
        extra = dets[0] + [((60.0, 60.0, 2.0, 2.0), score)]
        assert average_precision([extra], truths, 0.5) <= base


def test_ap_zero_truths_rejected():
    with pytest.raises(ValueError, match="zero ground-truth"):
        average_precision([[]], [[]], 0.5)


def test_recall_counts_matched_truths():
    truths = [[(4.0, 4.0, 4.0, 4.0), (20.0, 20.0, 4.0, 4.0)]]
    dets = [[((4.0, 4.0, 4.0, 4.0), 0.9)]]
    assert recall_at(dets, truths, 0.5) == 0.5
