"""AP metric tests: frozen cases, cross-form equivalences, oracle checks."""

import numpy as np
import pytest

from paramloss.apmetric import (
    COCO_THRESHOLDS,
    DetectionBatch,
    ap_pr_area,
    ap_ranked,
    ap_reformulated,
    assign,
    loc_score,
    loc_scores,
)
from paramloss.errors import EmptyPositiveError, InvalidInputError

UNIT = np.array([0.0, 0.0, 1.0, 1.0])


def shifted(dx, dy=0.0, w=1.0, h=1.0):
    return np.array([dx, dy, dx + w, dy + h])


class TestAssign:
    def test_above_threshold_positive(self):
        # candidate overlaps the single GT with IoU 0.6
        cand = np.array([[0.0, 0.0, 1.0, 0.75]])
        gt = np.array([[0.0, 0.0, 1.0, 1.25]])
        assert assign(cand, gt, 0.5).tolist() == [0]

    def test_disjoint_negative(self):
        cand = np.array([shifted(5.0)])
        gt = np.array([UNIT])
        assert assign(cand, gt, 0.5).tolist() == [-1]

    def test_argmax_selects_best_gt(self):
        # IoU 0.4 to gt0 and 0.7 to gt1 (within rounding of the constructions)
        cand = np.array([[0.0, 0.0, 1.0, 1.0]])
        gt0 = np.array([0.0, 0.0, 1.0, 0.4])   # IoU 0.4
        gt1 = np.array([0.0, 0.0, 1.0, 0.7])   # IoU 0.7
        out = assign(cand, np.stack([gt0, gt1]), 0.5)
        assert out.tolist() == [1]

    def test_empty_ground_truths(self):
        out = assign(np.array([UNIT]), np.zeros((0, 4)), 0.5)
        assert out.tolist() == [-1]

    def test_invalid_inputs(self):
        with pytest.raises(InvalidInputError):
            assign(np.zeros((0, 4)), np.array([UNIT]), 0.5)
        with pytest.raises(InvalidInputError):
            assign(np.array([UNIT]), np.array([UNIT]), 1.0)

    def test_threshold_inclusive(self):
        cand = np.array([[0.0, 0.0, 1.0, 0.5]])  # IoU exactly 0.5
        gt = np.array([UNIT])
        assert assign(cand, gt, 0.5).tolist() == [0]


class TestLocScores:
    def make_batch(self):
        boxes = np.stack([
            UNIT,                                # exact match
            np.array([0.0, 0.5, 1.0, 1.5]),     # giou 1/3 vs UNIT
            shifted(5.0),                        # negative
        ])
        gt = np.array([UNIT])
        return DetectionBatch(boxes, np.array([0.9, 0.8, 0.7]), gt,
                              np.array([0, 0, -1]))

    def test_negative_is_zero(self):
        batch = self.make_batch()
        for kind in ("iou", "giou", "l1"):
            assert loc_score(batch, 2, kind) == 0.0

    def test_giou_rescaled(self):
        batch = self.make_batch()
        assert abs(loc_score(batch, 0, "giou") - 1.0) < 1e-12
        assert abs(loc_score(batch, 1, "giou") - 2.0 / 3.0) < 1e-12

    def test_iou_unchanged(self):
        batch = self.make_batch()
        assert abs(loc_score(batch, 1, "iou") - 1.0 / 3.0) < 1e-12

    def test_vector_matches_scalar(self):
        batch = self.make_batch()
        vec = loc_scores(batch, "giou")
        for i in range(3):
            assert vec[i] == loc_score(batch, i, "giou")

    def test_index_out_of_range(self):
        with pytest.raises(InvalidInputError):
            loc_score(self.make_batch(), 3)


class TestBatchValidation:
    def test_assignment_out_of_range(self):
        with pytest.raises(InvalidInputError):
            DetectionBatch(np.array([UNIT]), np.array([0.5]),
                           np.array([UNIT]), np.array([1]))

    def test_length_mismatch(self):
        with pytest.raises(InvalidInputError):
            DetectionBatch(np.array([UNIT]), np.array([0.5, 0.6]),
                           np.array([UNIT]), np.array([0]))

    def test_non_integer_assignment(self):
        with pytest.raises(InvalidInputError):
            DetectionBatch(np.array([UNIT]), np.array([0.5]),
                           np.array([UNIT]), np.array([0.0]))


class TestApRanked:
    def test_perfect_ordering(self):
        scores = [0.9, 0.8, 0.3, 0.2]
        labels = [True, True, False, False]
        assert ap_ranked(scores, labels) == 1.0

    def test_interleaved(self):
        assert abs(ap_ranked([0.9, 0.7, 0.5], [True, False, True]) - 5.0 / 6.0) < 1e-12

    def test_single_swap(self):
        assert abs(ap_ranked([0.5, 0.9], [True, False]) - 0.5) < 1e-12

    def test_no_positive_raises(self):
        with pytest.raises(EmptyPositiveError):
            ap_ranked([0.4, 0.2], [False, False])

    def test_monotone_transform_invariance(self):
        rng = np.random.default_rng(211)
        for _ in range(200):
            n = rng.integers(2, 20)
            scores = rng.uniform(-2.0, 2.0, size=n)
            labels = rng.uniform(size=n) < 0.5
            if not labels.any():
                labels[0] = True
            transformed = scores**3 + 2.0 * scores
            assert abs(ap_ranked(scores, labels) - ap_ranked(transformed, labels)) <= 1e-12


class TestApReformulated:
    def test_matches_rank_form_example(self):
        got = ap_reformulated([0.9, 0.7, 0.5], [0.8, 0.0, 0.6])
        assert abs(got - 5.0 / 6.0) < 1e-12

    def test_single_prediction(self):
        assert ap_reformulated([0.3], [0.9]) == 1.0

    def test_all_zero_loc_raises(self):
        with pytest.raises(EmptyPositiveError):
            ap_reformulated([0.9, 0.1], [0.0, 0.0])

    def test_agrees_with_rank_form_on_random_instances(self):
        rng = np.random.default_rng(223)
        for _ in range(500):
            n = int(rng.integers(1, 21))
            scores = rng.uniform(size=n)
            while len(np.unique(scores)) < n:  # distinct scores only
                scores = rng.uniform(size=n)
            labels = rng.uniform(size=n) < 0.4
            if not labels.any():
                labels[rng.integers(n)] = True
            loc = np.where(labels, rng.uniform(0.05, 1.0, size=n), 0.0)
            assert abs(ap_reformulated(scores, loc) - ap_ranked(scores, labels)) <= 1e-12


class TestApPrArea:
    def test_perfect_single_detection(self):
        assert ap_pr_area(np.array([UNIT]), [0.9], np.array([UNIT]), [0.5]) == 1.0

    def test_duplicate_detection_keeps_full_area(self):
        boxes = np.stack([UNIT, UNIT])
        got = ap_pr_area(boxes, [0.9, 0.8], np.array([UNIT]), [0.5])
        assert got == 1.0

    def test_false_positive_ranked_first(self):
        boxes = np.stack([shifted(5.0), UNIT])
        got = ap_pr_area(boxes, [0.9, 0.7], np.array([UNIT]), [0.5])
        assert abs(got - 0.5) < 1e-12

    def test_coco_threshold_sweep(self):
        # IoU 0.72 passes thresholds 0.50 through 0.70, five of ten
        pred = np.array([[0.0, 0.0, 1.0, 0.72]])
        got = ap_pr_area(pred, [0.9], np.array([UNIT]))
        assert abs(got - 0.5) < 1e-12
        assert len(COCO_THRESHOLDS) == 10

    def test_empty_predictions(self):
        assert ap_pr_area(np.zeros((0, 4)), [], np.array([UNIT]), [0.5]) == 0.0

    def test_empty_ground_truth_rejected(self):
        with pytest.raises(InvalidInputError):
            ap_pr_area(np.array([UNIT]), [0.9], np.zeros((0, 4)), [0.5])

    def test_range_and_fp_monotonicity(self):
        rng = np.random.default_rng(227)
        for _ in range(100):
            n_gt = int(rng.integers(1, 5))
            gts = np.stack([shifted(3.0 * g) for g in range(n_gt)])
            n = int(rng.integers(1, 8))
            idx = rng.integers(0, n_gt, size=n)
            jitter = rng.uniform(-0.2, 0.2, size=(n, 4))
            boxes = gts[idx] + jitter
            boxes[:, 2] = np.maximum(boxes[:, 2], boxes[:, 0] + 0.05)
            boxes[:, 3] = np.maximum(boxes[:, 3], boxes[:, 1] + 0.05)
            scores = rng.uniform(0.1, 1.0, size=n)
            base = ap_pr_area(boxes, scores, gts)
            assert 0.0 <= base <= 1.0
            # append one disjoint detection scored below everything
            boxes2 = np.vstack([boxes, shifted(-10.0)])
            scores2 = np.append(scores, 0.01)
            assert ap_pr_area(boxes2, scores2, gts) <= base + 1e-12


class TestRankFormEqualsPrArea:
    """One-to-one assignments make the rank form and the PR area coincide."""

    def build_instance(self, rng):
        n_gt = int(rng.integers(1, 7))
        gts = np.stack([shifted(3.0 * g) for g in range(n_gt)])
        boxes = []
        labels = []
        for g in range(n_gt):
            # one true positive per GT, IoU well above 0.5, disjoint from others
            dy = rng.uniform(-0.1, 0.1)
            boxes.append(shifted(3.0 * g, dy))
            labels.append(True)
        n_fp = int(rng.integers(0, 6))
        for k in range(n_fp):
            boxes.append(shifted(-5.0 - 2.0 * k))
            labels.append(False)
        boxes = np.stack(boxes)
        scores = rng.permutation(np.linspace(0.1, 0.9, len(boxes)))
        return boxes, scores, gts, np.array(labels)

    def test_equivalence_on_constructed_instances(self):
        rng = np.random.default_rng(229)
        for _ in range(60):
            boxes, scores, gts, labels = self.build_instance(rng)
            lhs = ap_ranked(scores, labels)
            rhs = ap_pr_area(boxes, scores, gts, [0.5])
            assert abs(lhs - rhs) <= 1e-9
