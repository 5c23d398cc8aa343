"""Metric tests: hand-enumerated oracles, brute-force cross-checks and invariants."""

import numpy as np
import pytest

from segdebias.metrics import (
    CITYSCAPES_CATEGORY_MAP,
    ConfusionMatrix,
    MetricsReport,
    category_iou,
    collapse_by_category,
    confusion_accumulate,
    iou_per_class,
    mean_iou,
    percent_change,
)


def brute_force_iou(pred, gt, num_classes, ignore_id=255):
    """Direct per-class set intersection/union counting, the independent oracle."""
    valid = gt != ignore_id
    out = []
    for c in range(num_classes):
        inter = int(((pred == c) & (gt == c) & valid).sum())
        union = int((((pred == c) | (gt == c)) & valid).sum())
        out.append(np.nan if union == 0 else inter / union)
    return np.array(out)


class TestConfusionAccumulate:
    def test_diagonal(self):
        cm = ConfusionMatrix(2)
        confusion_accumulate(cm, np.zeros(4, dtype=int), np.zeros(4, dtype=int))
        assert cm.counts.tolist() == [[4, 0], [0, 0]]

    def test_hand_enumeration(self):
        cm = ConfusionMatrix(2)
        confusion_accumulate(cm, np.array([0, 1, 1, 1]), np.array([0, 0, 1, 1]))
        assert cm.counts.tolist() == [[1, 1], [0, 2]]

    def test_all_ignored_pixels_leave_cm_unchanged(self):
        cm = ConfusionMatrix(3)
        confusion_accumulate(cm, np.array([0, 1, 2]), np.full(3, 255))
        assert cm.counts.sum() == 0

    def test_total_equals_non_ignored_pixel_count(self):
        rng = np.random.default_rng(0)
        cm = ConfusionMatrix(5)
        gt = rng.integers(0, 5, size=(16, 16))
        gt[rng.random(gt.shape) < 0.2] = 255
        pred = rng.integers(0, 5, size=(16, 16))
        confusion_accumulate(cm, pred, gt)
        assert cm.total_pixels() == int((gt != 255).sum())

    def test_shape_mismatch_errors(self):
        cm = ConfusionMatrix(2)
        with pytest.raises(ValueError, match="shape"):
            confusion_accumulate(cm, np.zeros((2, 2), dtype=int), np.zeros((2, 3), dtype=int))

    def test_out_of_range_prediction_errors(self):
        cm = ConfusionMatrix(2)
        with pytest.raises(ValueError, match="outside"):
            confusion_accumulate(cm, np.array([5]), np.array([0]))

    def test_merge_is_associative_and_commutative(self):
        rng = np.random.default_rng(1)
        parts = []
        for _ in range(4):
            cm = ConfusionMatrix(4)
            confusion_accumulate(cm, rng.integers(0, 4, 50), rng.integers(0, 4, 50))
            parts.append(cm)
        a = parts[0].merge(parts[1]).merge(parts[2]).merge(parts[3])
        b = parts[3].merge(parts[2].merge(parts[1].merge(parts[0])))
        assert np.array_equal(a.counts, b.counts)


class TestIoU:
    def test_formula_arithmetic(self):
        cm = ConfusionMatrix(2, np.array([[2, 1], [1, 4]]))
        np.testing.assert_allclose(iou_per_class(cm), [2 / 4, 4 / 6])

    def test_perfect_diagonal(self):
        cm = ConfusionMatrix(3, np.diag([5, 2, 9]))
        np.testing.assert_allclose(iou_per_class(cm), [1.0, 1.0, 1.0])

    def test_absent_class_is_undefined_and_excluded(self):
        cm = ConfusionMatrix(3, np.array([[4, 0, 0], [0, 3, 0], [0, 0, 0]]))
        iou = iou_per_class(cm)
        assert np.isnan(iou[2])
        assert mean_iou(cm) == 1.0

    def test_mean_iou_value(self):
        cm = ConfusionMatrix(2, np.array([[2, 1], [1, 4]]))
        assert mean_iou(cm) == pytest.approx((0.5 + 2 / 3) / 2, abs=1e-12)

    def test_disjoint_prediction_scores_zero(self):
        cm = ConfusionMatrix(2, np.array([[0, 3], [2, 0]]))
        assert mean_iou(cm) == 0.0

    def test_empty_matrix_errors(self):
        with pytest.raises(ValueError, match="undefined"):
            mean_iou(ConfusionMatrix(3))

    def test_matches_brute_force_on_random_masks(self):
        rng = np.random.default_rng(42)
        for _ in range(50):
            gt = rng.integers(0, 5, size=(16, 16))
            gt[rng.random(gt.shape) < 0.15] = 255
            pred = rng.integers(0, 5, size=(16, 16))
            cm = ConfusionMatrix(5)
            confusion_accumulate(cm, pred, gt)
            np.testing.assert_array_equal(iou_per_class(cm), brute_force_iou(pred, gt, 5))

    def test_permutation_invariance(self):
        rng = np.random.default_rng(7)
        gt = rng.integers(0, 4, size=(12, 12))
        pred = rng.integers(0, 4, size=(12, 12))
        cm = ConfusionMatrix(4)
        confusion_accumulate(cm, pred, gt)
        perm = rng.permutation(4)
        cm_p = ConfusionMatrix(4)
        confusion_accumulate(cm_p, perm[pred], perm[gt])
        np.testing.assert_allclose(iou_per_class(cm_p)[perm], iou_per_class(cm))
        assert mean_iou(cm_p) == pytest.approx(mean_iou(cm), abs=1e-12)


class TestCategoryIoU:
    def test_merging_absorbs_interclass_confusion(self):
        cm = ConfusionMatrix(2, np.array([[2, 1], [1, 4]]))
        names, iou = category_iou(cm, {0: "thing", 1: "thing"})
        assert names == ["thing"]
        np.testing.assert_allclose(iou, [1.0])

    def test_identity_map_is_noop(self):
        rng = np.random.default_rng(3)
        cm = ConfusionMatrix(7, rng.integers(0, 20, size=(7, 7)))
        names, iou = category_iou(cm, {c: f"c{c}" for c in range(7)})
        np.testing.assert_array_equal(iou, iou_per_class(cm))

    def test_perfect_prediction_all_ones(self):
        cm = ConfusionMatrix(4, np.diag([3, 1, 2, 8]))
        _, iou = category_iou(cm, {0: "a", 1: "a", 2: "b", 3: "b"})
        np.testing.assert_allclose(iou, [1.0, 1.0])

    def test_cityscapes_map_produces_seven_categories(self):
        cm = ConfusionMatrix(19, np.eye(19, dtype=np.int64))
        names, iou = category_iou(cm, CITYSCAPES_CATEGORY_MAP)
        assert names == ["flat", "construction", "object", "nature", "sky", "human", "vehicle"]
        assert len(iou) == 7

    def test_missing_class_in_map_errors(self):
        cm = ConfusionMatrix(3)
        with pytest.raises(ValueError, match="missing"):
            collapse_by_category(cm, {0: "a", 1: "a"})


class TestPercentChange:
    def test_paper_invert_improvement(self):
        assert percent_change(8.50, 13.70) == pytest.approx(61.18, abs=0.01)

    def test_paper_rgb_to_invert_drop(self):
        assert percent_change(58.50, 8.50) == pytest.approx(-85.47, abs=0.05)

    def test_no_change(self):
        assert percent_change(3.25, 3.25) == 0.0

    def test_zero_baseline_errors(self):
        with pytest.raises(ValueError, match="zero baseline"):
            percent_change(0.0, 1.0)

    def test_asymmetry_relation(self):
        rng = np.random.default_rng(5)
        for _ in range(100):
            a, b = rng.uniform(0.5, 100, size=2)
            fwd = percent_change(a, b)
            back = percent_change(b, a)
            assert back == pytest.approx(-100 * fwd / (100 + fwd), rel=1e-12)


class TestMetricsReport:
    def _report(self):
        cm = ConfusionMatrix(2, np.array([[2, 1], [1, 4]]))
        return MetricsReport.from_confusion(
            cm, class_names=["bg", "fg"], category_map={0: "bg", 1: "fg"},
            loss=0.5, variant="rgb", scheme="baseline",
        )

    def test_json_roundtrip(self):
        report = self._report()
        again = MetricsReport.from_json(report.to_json())
        assert again.to_dict() == report.to_dict()

    def test_miou_is_mean_of_defined(self):
        report = self._report()
        defined = [v for v in report.per_class_iou if v is not None]
        assert report.miou == pytest.approx(sum(defined) / len(defined), abs=1e-12)

    def test_undefined_classes_flagged(self):
        cm = ConfusionMatrix(3, np.array([[4, 0, 0], [0, 3, 0], [0, 0, 0]]))
        report = MetricsReport.from_confusion(cm, class_names=["a", "b", "c"])
        assert report.per_class_iou[2] is None
        assert report.excluded_classes == [2]

    def test_markdown_contains_classes(self):
        md = self._report().to_markdown()
        assert "| bg |" in md and "| fg |" in md and "mIoU" in md

    def test_bad_schema_version_rejected(self):
        d = self._report().to_dict()
        d["schema_version"] = 999
        with pytest.raises(ValueError, match="schema_version"):
            MetricsReport.from_dict(d)
