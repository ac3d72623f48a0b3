import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

import oracles
from camrefine.coretypes import IGNORE, LabelMap, ResponseMap, SaliencyMap
from camrefine.errors import ContractError, DimensionError, UndefinedMetricError
from camrefine.metrics import (ConfusionMatrix, accumulate, activated_recall,
                               breakdown_by_class_count, conflict_temperature,
                               mean_iou, per_class_iou)


def lmap(data, num_classes=20):
    return LabelMap(data=np.asarray(data, dtype=np.int32), num_classes=num_classes)


def rmap(data, class_id=1):
    return ResponseMap(class_id=class_id, data=np.asarray(data, dtype=np.float32))


class TestAccumulate:
    def test_perfect_prediction_fills_diagonal(self):
        gt = lmap(np.full((4, 4), 3))
        cm = accumulate(ConfusionMatrix(classes=21), gt, gt)
        assert cm.counts[3, 3] == 16
        assert cm.total() == 16

    def test_all_ignore_leaves_matrix_unchanged(self):
        gt = lmap(np.full((4, 4), IGNORE))
        pred = lmap(np.zeros((4, 4), dtype=np.int32))
        cm = accumulate(ConfusionMatrix(classes=21), pred, gt)
        assert cm.total() == 0

    def test_hundred_random_pairs_match_oracle_exactly(self):
        rng = np.random.default_rng(0)
        cm = ConfusionMatrix(classes=21)
        expected = np.zeros((21, 21), dtype=np.int64)
        for _ in range(100):
            gt_arr = rng.integers(0, 21, size=(16, 16)).astype(np.int32)
            gt_arr[rng.random((16, 16)) < 0.1] = IGNORE
            pred_arr = rng.integers(0, 21, size=(16, 16)).astype(np.int32)
            cm = accumulate(cm, lmap(pred_arr), lmap(gt_arr))
            expected += oracles.confusion_tally(pred_arr, gt_arr, classes=21)
        assert np.array_equal(cm.counts, expected)

    def test_batch_equals_sum_of_per_image(self):
        rng = np.random.default_rng(1)
        pairs = [(lmap(rng.integers(0, 5, size=(8, 8)).astype(np.int32), 4),
                  lmap(rng.integers(0, 5, size=(8, 8)).astype(np.int32), 4))
                 for _ in range(5)]
        total = ConfusionMatrix(classes=5)
        parts = []
        for pred, gt in pairs:
            total = accumulate(total, pred, gt)
            parts.append(accumulate(ConfusionMatrix(classes=5), pred, gt))
        summed = parts[0]
        for p in parts[1:]:
            summed = summed + p
        assert np.array_equal(total.counts, summed.counts)

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionError):
            accumulate(ConfusionMatrix(classes=3), lmap(np.zeros((2, 2), int), 2),
                       lmap(np.zeros((3, 3), int), 2))

    def test_out_of_range_label(self):
        with pytest.raises(ContractError):
            accumulate(ConfusionMatrix(classes=3),
                       lmap(np.full((2, 2), 5), num_classes=5),
                       lmap(np.zeros((2, 2), int), num_classes=5))


class TestMeanIou:
    def test_perfect_is_one(self):
        gt = lmap(np.arange(16).reshape(4, 4) % 3, 2)
        cm = accumulate(ConfusionMatrix(classes=3), gt, gt)
        assert mean_iou(cm) == 1.0

    def test_analytic_half_coverage(self):
        # prediction says class 1 everywhere; truth is half class 1, half background
        pred = lmap(np.ones((4, 4), dtype=np.int32), 1)
        gt_arr = np.ones((4, 4), dtype=np.int32)
        gt_arr[:2] = 0
        cm = accumulate(ConfusionMatrix(classes=2), pred, lmap(gt_arr, 1))
        assert mean_iou(cm) == pytest.approx(0.25)
        assert per_class_iou(cm) == [0.0, pytest.approx(0.5)]

    def test_random_matrices_match_formula(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            counts = rng.integers(0, 50, size=(6, 6)).astype(np.int64)
            cm = ConfusionMatrix(classes=6, counts=counts)
            assert abs(mean_iou(cm) - oracles.miou_formula(counts)) < 1e-12

    def test_absent_class_excluded(self):
        counts = np.zeros((3, 3), dtype=np.int64)
        counts[0, 0] = 10  # only background present
        assert mean_iou(ConfusionMatrix(classes=3, counts=counts)) == 1.0

    def test_empty_matrix_undefined(self):
        with pytest.raises(UndefinedMetricError):
            mean_iou(ConfusionMatrix(classes=3))

    def test_transpose_symmetry(self):
        rng = np.random.default_rng(3)
        counts = rng.integers(0, 30, size=(5, 5)).astype(np.int64)
        a = mean_iou(ConfusionMatrix(classes=5, counts=counts))
        b = mean_iou(ConfusionMatrix(classes=5, counts=counts.T))
        assert a == pytest.approx(b, abs=1e-15)


class TestActivatedRecall:
    def test_everywhere_positive_gives_one(self):
        gt = lmap(np.ones((4, 4), dtype=np.int32), 1)
        maps = {1: rmap(np.ones((4, 4)))}
        assert activated_recall(maps, gt) == 1.0

    def test_all_zero_maps_give_zero(self):
        gt = lmap(np.ones((4, 4), dtype=np.int32), 1)
        maps = {1: rmap(np.zeros((4, 4)))}
        assert activated_recall(maps, gt) == 0.0

    def test_no_foreground_undefined(self):
        gt = lmap(np.zeros((4, 4), dtype=np.int32), 1)
        with pytest.raises(UndefinedMetricError):
            activated_recall({1: rmap(np.ones((4, 4)))}, gt)

    def test_partial_coverage_counts_pixels(self):
        gt_arr = np.zeros((4, 4), dtype=np.int32)
        gt_arr[:, :2] = 1
        data = np.zeros((4, 4))
        data[0, 0] = 0.5
        assert activated_recall({1: rmap(data)}, lmap(gt_arr, 1)) == pytest.approx(1 / 8)


class TestBreakdown:
    def test_single_class_bucket_degenerate(self):
        rng = np.random.default_rng(4)
        pred = lmap(rng.integers(0, 3, size=(6, 6)).astype(np.int32), 2)
        gt = lmap(rng.integers(0, 3, size=(6, 6)).astype(np.int32), 2)
        out = breakdown_by_class_count([(pred, gt, 1)], classes=3)
        assert out["2"] is None and out["3+"] is None
        assert out["1"] == pytest.approx(out["total"])

    def test_buckets_partition_and_sum(self):
        rng = np.random.default_rng(5)
        images = []
        for count in (1, 2, 4):
            pred = lmap(rng.integers(0, 4, size=(5, 5)).astype(np.int32), 3)
            gt = lmap(rng.integers(0, 4, size=(5, 5)).astype(np.int32), 3)
            images.append((pred, gt, count))
        out = breakdown_by_class_count(images, classes=4)
        assert out["1"] is not None and out["2"] is not None and out["3+"] is not None
        cms = {}
        for pred, gt, count in images:
            key = "1" if count == 1 else ("2" if count == 2 else "3+")
            cms[key] = oracles.confusion_tally(pred.data, gt.data, classes=4)
        for key, counts in cms.items():
            assert out[key] == pytest.approx(oracles.miou_formula(counts), abs=1e-12)
        total = sum(cms.values())
        assert out["total"] == pytest.approx(oracles.miou_formula(total), abs=1e-12)


class TestConflictTemperature:
    def test_identity_masks_give_one(self):
        pseudo = np.zeros((4, 4), dtype=np.int32)
        pseudo[:, 2:] = 1  # right half foreground
        sal = np.zeros((4, 4), dtype=np.float32)
        sal[:, 2:] = 1.0  # salient exactly where foreground
        tau = conflict_temperature(lmap(pseudo, 1), SaliencyMap(data=sal))
        assert tau == 1.0

    def test_complementary_masks_give_zero(self):
        pseudo = np.zeros((4, 4), dtype=np.int32)
        pseudo[:, 2:] = 1
        sal = np.zeros((4, 4), dtype=np.float32)
        sal[:, :2] = 1.0  # salient exactly where background
        tau = conflict_temperature(lmap(pseudo, 1), SaliencyMap(data=sal))
        assert tau == 0.0

    def test_random_masks_match_bucket_oracle(self):
        rng = np.random.default_rng(6)
        for _ in range(20):
            pseudo_arr = rng.integers(0, 2, size=(8, 8)).astype(np.int32)
            sal_arr = rng.random((8, 8)).astype(np.float32)
            tau = conflict_temperature(lmap(pseudo_arr, 1), SaliencyMap(data=sal_arr))
            bg = pseudo_arr == 0
            nonsal = sal_arr < 0.5
            ious = []
            both = (bg & nonsal).sum()
            union = (bg | nonsal).sum()
            if union:
                ious.append(both / union)
            both_fg = (~bg & ~nonsal).sum()
            union_fg = (~bg | ~nonsal).sum()
            if union_fg:
                ious.append(both_fg / union_fg)
            assert tau == pytest.approx(sum(ious) / len(ious), abs=1e-12)

    def test_saliency_binarized_at_half_inclusive(self):
        pseudo = lmap(np.ones((2, 2), dtype=np.int32), 1)
        sal = SaliencyMap(data=np.full((2, 2), 0.5, dtype=np.float32))
        assert conflict_temperature(pseudo, sal) == 1.0

    def test_complement_symmetry(self):
        rng = np.random.default_rng(7)
        pseudo_arr = rng.integers(0, 2, size=(8, 8)).astype(np.int32)
        sal_arr = (rng.random((8, 8)) > 0.5).astype(np.float32)
        a = conflict_temperature(lmap(pseudo_arr, 1), SaliencyMap(data=sal_arr))
        b = conflict_temperature(lmap(1 - pseudo_arr, 1),
                                 SaliencyMap(data=1.0 - sal_arr))
        assert a == pytest.approx(b, abs=1e-12)

    @given(hnp.arrays(np.int32, (6, 6), elements=st.integers(0, 2)),
           hnp.arrays(np.float32, (6, 6), elements=st.floats(0, 1, width=32)))
    @settings(max_examples=50, deadline=None)
    def test_bounded_zero_one(self, pseudo_arr, sal_arr):
        tau = conflict_temperature(lmap(pseudo_arr, 2), SaliencyMap(data=sal_arr))
        assert 0.0 <= tau <= 1.0

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionError):
            conflict_temperature(lmap(np.zeros((2, 2), dtype=np.int32), 1),
                                 SaliencyMap(data=np.zeros((3, 3), dtype=np.float32)))
