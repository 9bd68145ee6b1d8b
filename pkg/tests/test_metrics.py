"""
Tests for matching, AP, precision/recall/F1 and k-fold splitting
"""
import numpy as np
import pytest

from backend.analysis.metrics import (
    average_precision,
    box_iou,
    dataset_average_precision,
    match_detections,
    merge_matches,
    precision_recall_curve,
    prf1,
)
from backend.analysis.validation import kfold_split
from backend.embedding.context import BBox
from backend.errors import ArgumentError
from detector.contracts import Annotation, Detection, MatchResult
from detector.selftest import brute_force_ap, check_ap_oracle, random_detection_instance


def det(cx, cy, confidence, radius=3.0):
    return Detection(cx=cx, cy=cy, box=BBox.around(cx, cy, radius), confidence=confidence)


def gt(cx, cy, radius=3.0):
    return Annotation.from_center(cx, cy, radius)


class TestMatchDetections:
    """Greedy one-to-one matching"""

    def test_within_tolerance(self):
        result = match_detections([det(5, 5, 0.9)], [gt(5, 6)], tol=2.0)
        assert (result.true_positives, result.false_positives, result.false_negatives) == (1, 0, 0)
        assert result.pairs == [(0, 0, 1.0)]

    def test_two_preds_one_gt(self):
        result = match_detections([det(5, 5, 0.9), det(6, 5, 0.8)], [gt(5, 5)], tol=2.0)
        assert (result.true_positives, result.false_positives, result.false_negatives) == (1, 1, 0)

    def test_no_preds(self):
        result = match_detections([], [gt(1, 1), gt(9, 9), gt(20, 20)], tol=2.0)
        assert result.false_negatives == 3 and result.true_positives == 0

    def test_tolerance_inclusive(self):
        assert match_detections([det(0, 0, 0.5)], [gt(3, 4)], tol=5.0).true_positives == 1

    def test_higher_confidence_matches_first(self):
        result = match_detections([det(5, 5, 0.2), det(6, 5, 0.9)], [gt(5, 5)], tol=2.0)
        assert result.pairs[0][0] == 1

    def test_nearest_unmatched(self):
        result = match_detections([det(5, 5, 0.9)], [gt(6.5, 5), gt(5.5, 5)], tol=2.0)
        assert result.pairs[0][1] == 1

    def test_iou_mode(self):
        preds = [det(10, 10, 0.9), det(30, 30, 0.8)]
        gts = [gt(11, 10), gt(40, 40)]
        result = match_detections(preds, gts, tol=1.0, mode="iou", iou_threshold=0.5)
        assert result.true_positives == 1 and result.pairs[0][:2] == (0, 0)

    def test_rejects_tolerance(self):
        with pytest.raises(ArgumentError):
            match_detections([], [], tol=0.0)

    def test_box_iou(self):
        assert box_iou(BBox(0, 0, 2, 2), BBox(1, 0, 2, 2)) == pytest.approx(1 / 3)
        assert box_iou(BBox(0, 0, 1, 1), BBox(5, 5, 1, 1)) == 0.0


class TestAveragePrecision:
    """All-point interpolated AP"""

    def test_single_correct(self):
        assert average_precision([det(5, 5, 0.7)], [gt(5, 5)], tol=2.0) == 1.0

    def test_false_positive_ranked_first(self):
        preds = [det(50, 50, 0.9), det(5, 5, 0.8)]
        assert average_precision(preds, [gt(5, 5)], tol=2.0) == pytest.approx(0.5)

    def test_perfect_predictions(self):
        gts = [gt(10 * i, 5) for i in range(1, 6)]
        preds = [det(g.cx, g.cy, 0.5 + 0.1 * i) for i, g in enumerate(gts)]
        assert average_precision(preds, gts, tol=2.0) == 1.0
        assert prf1(match_detections(preds, gts, tol=2.0)) == (1.0, 1.0, 1.0)

    def test_no_ground_truth(self):
        with pytest.raises(ArgumentError):
            average_precision([det(1, 1, 0.5)], [], tol=2.0)

    def test_matches_brute_force(self):
        result = check_ap_oracle(trials=1000, seed=3)
        assert result.passed, result.detail

    def test_raising_tp_confidence_never_lowers_ap(self, rng):
        tol = 6.0
        for _ in range(200):
            preds, gts = random_detection_instance(rng)
            base = average_precision(preds, gts, tol)
            hits = {a for a, _, _ in match_detections(preds, gts, tol).pairs}
            for i in hits:
                boosted = list(preds)
                boosted[i] = det(preds[i].cx, preds[i].cy, min(1.0, preds[i].confidence + 0.3))
                if {a for a, _, _ in match_detections(boosted, gts, tol).pairs} == hits:
                    assert average_precision(boosted, gts, tol) >= base - 1e-12

    def test_brute_force_known_value(self):
        preds = [det(50, 50, 0.9), det(5, 5, 0.8)]
        assert brute_force_ap(preds, [gt(5, 5)], 2.0) == pytest.approx(0.5)

    def test_dataset_ap_pools_images(self):
        items = [([det(5, 5, 0.9)], [gt(5, 5)]), ([det(50, 50, 0.8)], [gt(5, 5)])]
        assert dataset_average_precision(items, tol=2.0) == pytest.approx(0.5)

    def test_pr_curve(self):
        precision, recall, confidence = precision_recall_curve(
            [([det(50, 50, 0.9), det(5, 5, 0.8)], [gt(5, 5)])], tol=2.0
        )
        np.testing.assert_allclose(precision, [0.0, 0.5])
        np.testing.assert_allclose(recall, [0.0, 1.0])
        np.testing.assert_allclose(confidence, [0.9, 0.8])


class TestPrf1:
    """Precision, recall and F1 with degenerate conventions"""

    def test_known_value(self):
        precision, recall, f1 = prf1(MatchResult(true_positives=3, false_positives=2, false_negatives=1))
        assert (precision, recall) == (0.6, 0.75)
        assert f1 == pytest.approx(0.666667, abs=1e-6)

    def test_equal_precision_recall(self):
        _, _, f1 = prf1(MatchResult(true_positives=2, false_positives=2, false_negatives=2))
        assert f1 == pytest.approx(0.5)

    def test_all_zero(self):
        assert prf1(MatchResult(0, 0, 0)) == (0.0, 0.0, 0.0)

    def test_merge(self):
        merged = merge_matches([MatchResult(1, 2, 3), MatchResult(4, 5, 6)])
        assert (merged.true_positives, merged.false_positives, merged.false_negatives) == (5, 7, 9)


class TestKFoldSplit:
    """Seeded k-fold partition"""

    def test_five_folds_of_two(self):
        folds = kfold_split(range(10), 5, seed=0)
        assert len(folds) == 5
        assert all(len(test) == 2 for _, test in folds)

    def test_partition_properties(self):
        ids = list(range(100, 117))
        folds = kfold_split(ids, 4, seed=11)
        tests = [set(test) for _, test in folds]
        assert set().union(*tests) == set(ids)
        assert sum(len(t) for t in tests) == len(ids)
        assert max(map(len, tests)) - min(map(len, tests)) <= 1
        for train_ids, test_ids in folds:
            assert set(train_ids).isdisjoint(test_ids)
            assert len(train_ids) + len(test_ids) == len(ids)

    def test_seeded(self):
        assert kfold_split(range(12), 3, seed=4) == kfold_split(range(12), 3, seed=4)
        assert kfold_split(range(12), 3, seed=4) != kfold_split(range(12), 3, seed=5)

    @pytest.mark.parametrize("k", [1, 11])
    def test_rejects_k(self, k):
        with pytest.raises(ArgumentError):
            kfold_split(range(10), k, seed=0)
