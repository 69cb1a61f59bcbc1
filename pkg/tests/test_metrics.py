import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from avdetect import metrics
from avdetect.errors import MetricError
from avdetect.localize import Segment

from oracles import (
    brute_force_ap,
    brute_force_ar,
    random_instance,
    random_scored_set,
    ranking_auc,
    sweep_rates,
)


class TestAuc:
    def test_example(self):
        assert metrics.auc([0.9, 0.4, 0.6, 0.1], [1, 1, 0, 0]) == pytest.approx(0.75, abs=1e-12)

    def test_perfect_and_inverted(self):
        assert metrics.auc([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0]) == 1.0
        assert metrics.auc([0.1, 0.2, 0.8, 0.9], [1, 1, 0, 0]) == 0.0

    def test_all_tied(self):
        assert metrics.auc([0.5] * 4, [1, 0, 1, 0]) == 0.5

    def test_matches_pairwise_ranking(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            scores, labels = random_scored_set(rng)
            assert abs(metrics.auc(scores, labels) - ranking_auc(scores, labels)) <= 1e-9

    @given(st.lists(st.floats(0, 1), min_size=2, max_size=30), st.integers(0, 2**31 - 1))
    @settings(max_examples=60, deadline=None)
    def test_property_ranking(self, scores, seed):
        labels = np.random.default_rng(seed).integers(0, 2, len(scores))
        labels[0], labels[-1] = 0, 1
        assert abs(metrics.auc(scores, labels) - ranking_auc(scores, labels)) <= 1e-9

    def test_single_class_rejected(self):
        with pytest.raises(MetricError):
            metrics.auc([0.1, 0.2], [1, 1])

    def test_non_finite_rejected(self):
        with pytest.raises(MetricError):
            metrics.auc([np.nan, 0.2], [1, 0])

    def test_length_mismatch(self):
        with pytest.raises(MetricError):
            metrics.auc([0.1, 0.2, 0.3], [1, 0])


class TestRoc:
    def test_points(self):
        pts = metrics.roc_curve([0.9, 0.4, 0.6, 0.1], [1, 1, 0, 0])
        assert [(f, t) for f, t, _ in pts] == [(0, 0), (0, 0.5), (0.5, 0.5), (0.5, 1), (1, 1)]

    def test_monotone(self):
        rng = np.random.default_rng(1)
        scores, labels = random_scored_set(rng, 40)
        pts = metrics.roc_curve(scores, labels)
        assert all(a[0] <= b[0] and a[1] <= b[1] for a, b in zip(pts, pts[1:]))
        assert pts[-1][:2] == (1.0, 1.0)


class TestPauc:
    def test_perfect(self):
        assert metrics.pauc([0.9, 0.8, 0.2], [1, 1, 0]) == 1.0

    def test_random_diagonal(self):
        # ROC on the diagonal: area over [0, f] is f^2/2, normalized by f
        scores = np.repeat(np.linspace(0, 1, 1001), 2)
        labels = np.tile([0, 1], 1001)
        assert metrics.pauc(scores, labels, 0.1) == pytest.approx(0.05, abs=1e-9)

    def test_full_range_equals_auc(self):
        rng = np.random.default_rng(2)
        scores, labels = random_scored_set(rng)
        assert metrics.pauc(scores, labels, 1.0) == pytest.approx(metrics.auc(scores, labels), abs=1e-12)

    @pytest.mark.parametrize("f", [0.0, -0.1, 1.5])
    def test_range_checked(self, f):
        with pytest.raises(MetricError):
            metrics.pauc([0.2, 0.8], [0, 1], f)


class TestEer:
    def test_perfect(self):
        assert metrics.eer([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0]) == 0.0

    def test_example_matches_sweep(self):
        scores, labels = [0.9, 0.4, 0.6, 0.1], [1, 1, 0, 0]
        rates = sweep_rates(scores, labels)
        fpr, fnr = min(rates, key=lambda r: abs(r[0] - r[1]))
        assert abs(metrics.eer(scores, labels) - (fpr + fnr) / 2) <= 5e-4

    def test_matches_sweep_where_rates_cross(self):
        rng = np.random.default_rng(3)
        checked = 0
        for _ in range(200):
            n = int(rng.integers(2, 12))
            scores = np.round(rng.uniform(0, 1, 2 * n), 3)
            labels = np.r_[np.zeros(n), np.ones(n)]
            crossings = [r for r in sweep_rates(scores, labels, 1e-3) if r[0] == r[1]]
            if not crossings:
                continue
            checked += 1
            assert abs(metrics.eer(scores, labels) - crossings[0][0]) <= 5e-4
        assert checked > 20

    def test_bounded(self):
        rng = np.random.default_rng(4)
        for _ in range(50):
            scores, labels = random_scored_set(rng)
            assert 0.0 <= metrics.eer(scores, labels) <= 1.0


class TestConfusion:
    def test_strict_threshold(self):
        rates = metrics.confusion_rates([0.5, 0.51, 0.2, 0.7], [1, 1, 0, 0])
        assert (rates["TP"], rates["FN"], rates["FP"], rates["TN"]) == (1, 1, 1, 1)
        assert rates["ACC"] == 0.5

    def test_detection_keys(self):
        out = metrics.detection_metrics([0.9, 0.1], [1, 0])
        assert tuple(out) == metrics.DETECTION_METRICS


class TestAveragePrecision:
    def test_perfect(self):
        gts = {"a": [(0.0, 1.0)], "b": [(2.0, 3.0)]}
        preds = {"a": [Segment(0.0, 1.0, 0.9)], "b": [Segment(2.0, 3.0, 0.8)]}
        assert metrics.ap_at_iou(preds, gts, 0.5) == 1.0

    def test_false_positive_first(self):
        gts = {"a": [(0.0, 1.0)]}
        preds = {"a": [Segment(5.0, 6.0, 0.9), Segment(0.0, 1.0, 0.8)]}
        assert metrics.ap_at_iou(preds, gts, 0.5) == pytest.approx(0.5)

    def test_duplicate_is_false_positive(self):
        gts = {"a": [(0.0, 1.0), (4.0, 5.0)]}
        preds = {"a": [Segment(0.0, 1.0, 0.9), Segment(0.0, 1.0, 0.8), Segment(4.0, 5.0, 0.7)]}
        # precision 1, 1/2, 2/3 at recalls 1/2, 1/2, 1 -> 0.5 * 1 + 0.5 * 2/3
        assert metrics.ap_at_iou(preds, gts, 0.5) == pytest.approx(0.5 + 1 / 3)

    def test_no_predictions(self):
        assert metrics.ap_at_iou({}, {"a": [(0.0, 1.0)]}, 0.5) == 0.0

    def test_needs_ground_truth(self):
        with pytest.raises(MetricError):
            metrics.ap_at_iou({}, {"a": []}, 0.5)

    def test_matches_brute_force(self):
        rng = np.random.default_rng(0)
        for _ in range(300):
            preds, gts = random_instance(rng)
            if not any(gts.values()):
                continue
            for t in (0.3, 0.5, 0.75, 0.95):
                assert abs(metrics.ap_at_iou(preds, gts, t) - brute_force_ap(preds, gts, t)) <= 1e-9


class TestAverageRecall:
    def test_exact_hit(self):
        assert metrics.ar_at_k({"a": [Segment(0, 1, 0.5)]}, {"a": [(0.0, 1.0)]}, 10) == 1.0

    def test_partial_overlap(self):
        # IoU 0.6 clears 0.5 and 0.55 and 0.6 of the ten thresholds
        preds = {"a": [Segment(0.0, 0.6, 0.5)]}
        assert metrics.ar_at_k(preds, {"a": [(0.0, 1.0)]}, 10) == pytest.approx(0.3)

    def test_top_k_cut(self):
        preds = {"a": [Segment(5, 6, 0.9), Segment(0, 1, 0.1)]}
        assert metrics.ar_at_k(preds, {"a": [(0.0, 1.0)]}, 1) == 0.0
        assert metrics.ar_at_k(preds, {"a": [(0.0, 1.0)]}, 2) == 1.0

    def test_invalid_k(self):
        with pytest.raises(MetricError):
            metrics.ar_at_k({}, {"a": [(0.0, 1.0)]}, 0)

    def test_matches_brute_force(self):
        rng = np.random.default_rng(1)
        for _ in range(300):
            preds, gts = random_instance(rng)
            if not any(gts.values()):
                continue
            for k in (1, 2, 10):
                assert abs(metrics.ar_at_k(preds, gts, k) - brute_force_ar(preds, gts, k)) <= 1e-9


class TestReport:
    def test_roundtrip(self):
        report = metrics.MetricsReport({"AUC": 0.91234, "EER": 0.1}, ["video-level scores"])
        back = metrics.MetricsReport.from_text(report.to_text())
        assert back.notes == report.notes
        assert back.values == {"AUC": 0.9123, "EER": 0.1}

    def test_localization_keys(self):
        out = metrics.localization_metrics({"a": [Segment(0, 1, 0.9)]}, {"a": [(0.0, 1.0)]})
        assert tuple(out) == metrics.LOCALIZATION_METRICS
