"""Tests for AUROC, AP, F1-max and PRO."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import ndimage
from sklearn.metrics import average_precision_score, precision_recall_curve, roc_auc_score

from mvad.errors import ShapeError, UndefinedMetricError
from mvad.metrics import (
    METRIC_NAMES,
    RegionSet,
    ScoredSet,
    auroc,
    average_precision,
    f1_max,
    metric_table,
    pro,
    pro_curve,
)


def _random_scored(seed, n=200, ties=False):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 2, size=n)
    labels[:2] = [0, 1]
    scores = rng.normal(size=n) + labels
    if ties:
        scores = np.round(scores, 1)
    return scores, labels


def _random_small_set(rng):
    """n <= 50 scores with both labels present; half the sets carry heavy ties."""
    n = int(rng.integers(2, 51))
    labels = rng.integers(0, 2, size=n)
    labels[rng.choice(n, size=2, replace=False)] = [0, 1]
    scores = rng.normal(size=n) + 0.5 * labels
    if rng.random() < 0.5:
        scores = np.round(scores, 1)
    return scores, labels


def _pairwise_auroc(scores, labels):
    pos, neg = scores[labels == 1], scores[labels == 0]
    wins = sum(1.0 if p > q else 0.5 if p == q else 0.0 for p in pos for q in neg)
    return wins / (len(pos) * len(neg))


def _threshold_counts(scores, labels):
    """(TP, FP) when predicting positive at score >= θ, for each distinct θ, highest first."""
    for theta in sorted(set(scores.tolist()), reverse=True):
        predicted = [s >= theta for s in scores]
        tp = sum(1 for p, y in zip(predicted, labels) if p and y == 1)
        fp = sum(1 for p, y in zip(predicted, labels) if p and y == 0)
        yield tp, fp


def _looped_ap(scores, labels):
    n_pos = int(labels.sum())
    ap, prev_recall = 0.0, 0.0
    for tp, fp in _threshold_counts(scores, labels):
        recall = tp / n_pos
        ap += tp / (tp + fp) * (recall - prev_recall)
        prev_recall = recall
    return ap


def _looped_f1(scores, labels):
    n_pos = int(labels.sum())
    best = 0.0
    for tp, fp in _threshold_counts(scores, labels):
        if tp:
            precision, recall = tp / (tp + fp), tp / n_pos
            best = max(best, 2 * precision * recall / (precision + recall))
    return best


def _looped_pro(masks, maps, fpr_limit):
    """PRO from first principles: one full pass over the maps per threshold."""
    labeled, n_regions = ndimage.label(masks)
    negatives = masks == 0
    points = [(0.0, 0.0)]
    for theta in sorted(set(maps.ravel().tolist()), reverse=True):
        predicted = maps >= theta
        fpr = (predicted & negatives).sum() / negatives.sum()
        overlaps = [
            (predicted & (labeled == r)).sum() / (labeled == r).sum()
            for r in range(1, n_regions + 1)
        ]
        points.append((fpr, float(np.mean(overlaps))))
    area = 0.0
    for (x0, y0), (x1, y1) in zip(points, points[1:]):
        if x0 >= fpr_limit:
            break
        if x1 > fpr_limit:
            y1 = y0 + (fpr_limit - x0) / (x1 - x0) * (y1 - y0)
            x1 = fpr_limit
        area += (x1 - x0) * (y0 + y1) / 2
    return area / fpr_limit


class TestScoredSet:
    def test_rejects_length_mismatch(self):
        with pytest.raises(ShapeError):
            ScoredSet(np.ones(3), np.ones(2))

    def test_rejects_non_binary_labels(self):
        with pytest.raises(ShapeError, match="binary"):
            ScoredSet(np.ones(2), np.array([0, 2]))

    def test_rejects_empty(self):
        with pytest.raises(ShapeError):
            ScoredSet(np.array([]), np.array([]))

    def test_flattens_maps(self):
        s = ScoredSet(np.ones((2, 3, 3)), np.zeros((2, 3, 3)))
        assert s.scores.shape == (18,)
        assert s.n_neg == 18


class TestAuroc:
    def test_perfect_and_reversed(self):
        labels = np.array([0, 0, 1, 1])
        assert auroc(np.array([0.1, 0.2, 0.8, 0.9]), labels) == 1.0
        assert auroc(np.array([0.9, 0.8, 0.2, 0.1]), labels) == 0.0

    def test_all_tied_is_half(self):
        assert auroc(np.ones(6), np.array([0, 1, 0, 1, 1, 0])) == 0.5

    def test_single_class_undefined(self):
        with pytest.raises(UndefinedMetricError):
            auroc(np.array([0.1, 0.4]), np.array([0, 0]))

    @pytest.mark.parametrize("seed", range(5))
    @pytest.mark.parametrize("ties", [False, True])
    def test_matches_sklearn(self, seed, ties):
        scores, labels = _random_scored(seed, ties=ties)
        assert auroc(scores, labels) == pytest.approx(roc_auc_score(labels, scores), abs=1e-12)


class TestAveragePrecision:
    def test_perfect_ranking(self):
        assert average_precision(np.array([0.1, 0.9, 0.8]), np.array([0, 1, 1])) == 1.0

    def test_hand_computed(self):
        # Ranking: 1 (pos), 0.8 (neg), 0.6 (pos): AP = (1/1 + 2/3) / 2
        ap = average_precision(np.array([1.0, 0.8, 0.6]), np.array([1, 0, 1]))
        assert ap == pytest.approx((1.0 + 2.0 / 3.0) / 2.0)

    def test_no_positives_undefined(self):
        with pytest.raises(UndefinedMetricError):
            average_precision(np.array([0.1, 0.4]), np.array([0, 0]))

    @pytest.mark.parametrize("seed", range(5))
    @pytest.mark.parametrize("ties", [False, True])
    def test_matches_sklearn(self, seed, ties):
        scores, labels = _random_scored(seed, ties=ties)
        expected = average_precision_score(labels, scores)
        assert average_precision(scores, labels) == pytest.approx(expected, abs=1e-12)


class TestF1Max:
    def test_perfect_separation(self):
        assert f1_max(np.array([0.1, 0.2, 0.9]), np.array([0, 0, 1])) == 1.0

    def test_tied_scores_cross_together(self):
        # Only threshold: everything positive. P = 1/2, R = 1.
        assert f1_max(np.ones(4), np.array([0, 1, 0, 1])) == pytest.approx(2 / 3)

    @pytest.mark.parametrize("seed", range(5))
    @pytest.mark.parametrize("ties", [False, True])
    def test_matches_sklearn_curve(self, seed, ties):
        scores, labels = _random_scored(seed, ties=ties)
        precision, recall, _ = precision_recall_curve(labels, scores)
        denom = precision + recall
        f1 = np.where(denom > 0, 2 * precision * recall / np.where(denom > 0, denom, 1), 0)
        assert f1_max(scores, labels) == pytest.approx(f1.max(), abs=1e-12)


class TestMonotoneInvariance:
    @settings(max_examples=50, deadline=None)
    @given(seed=st.integers(0, 10_000), shift=st.floats(-5, 5), gain=st.floats(0.1, 10))
    def test_threshold_free_metrics_ignore_monotone_maps(self, seed, shift, gain):
        scores, labels = _random_scored(seed, n=60, ties=True)
        mapped = np.exp(gain * scores + shift)
        assert auroc(mapped, labels) == pytest.approx(auroc(scores, labels), abs=1e-12)
        assert average_precision(mapped, labels) == pytest.approx(
            average_precision(scores, labels), abs=1e-12
        )
        assert f1_max(mapped, labels) == pytest.approx(f1_max(scores, labels), abs=1e-12)

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 10_000), gain=st.floats(0.5, 3))
    def test_exact_pro_ignores_monotone_maps(self, seed, gain):
        rng = np.random.default_rng(seed)
        masks = np.zeros((2, 8, 8))
        masks[0, 1:4, 1:4] = 1
        masks[1, 5:7, 2:6] = 1
        maps = np.round(rng.normal(size=masks.shape) + masks, 1)
        plain = pro(RegionSet.from_masks(masks, maps), thresholds=None)
        mapped = pro(RegionSet.from_masks(masks, np.exp(gain * maps)), thresholds=None)
        assert mapped == pytest.approx(plain, abs=1e-12)

    def test_cubic_map_changes_nothing(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            scores, labels = _random_small_set(rng)
            cubed = scores**3 + scores
            for metric in (auroc, average_precision, f1_max):
                assert metric(cubed, labels) == pytest.approx(metric(scores, labels), abs=1e-12)

    def test_negated_scores_flip_auroc(self):
        rng = np.random.default_rng(4)
        for _ in range(50):
            scores, labels = _random_small_set(rng)
            assert auroc(-scores, labels) == pytest.approx(1.0 - auroc(scores, labels), abs=1e-12)


class TestDefinitionOracles:
    """The sort-based metrics against quadratic loops written straight from the definitions."""

    SETS = 200

    def _sets(self, seed):
        rng = np.random.default_rng(seed)
        return [_random_small_set(rng) for _ in range(self.SETS)]

    def test_auroc_matches_pairwise_count(self):
        for scores, labels in self._sets(0):
            expected = _pairwise_auroc(scores, labels)
            assert auroc(scores, labels) == pytest.approx(expected, abs=1e-12)

    def test_ap_matches_threshold_loop(self):
        for scores, labels in self._sets(1):
            expected = _looped_ap(scores, labels)
            assert average_precision(scores, labels) == pytest.approx(expected, abs=1e-12)

    def test_f1_max_matches_threshold_loop(self):
        for scores, labels in self._sets(2):
            assert f1_max(scores, labels) == pytest.approx(_looped_f1(scores, labels), abs=1e-12)

    def test_sets_include_ties(self):
        tied = [s for s, _ in self._sets(0) if np.unique(s).size < s.size]
        assert len(tied) > self.SETS // 4


class TestRegions:
    def test_four_connectivity(self):
        mask = np.array([[1, 0], [0, 1]])
        regions = RegionSet.from_masks(mask, np.zeros((2, 2)))
        assert regions.n_regions == 2
        np.testing.assert_array_equal(regions.region_sizes(), [1, 1])

    def test_regions_never_span_stacked_maps(self):
        masks = np.ones((2, 3, 3))
        assert RegionSet.from_masks(masks, np.zeros((2, 3, 3))).n_regions == 2

    def test_four_dimensional_stacks(self):
        masks = np.zeros((2, 2, 4, 4))
        masks[:, :, 0, 0] = 1
        assert RegionSet.from_masks(masks, np.zeros(masks.shape)).n_regions == 4

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            RegionSet.from_masks(np.ones((2, 2)), np.ones((3, 3)))


class TestPro:
    def test_perfect_segmentation_is_one(self):
        mask = np.zeros((6, 6))
        mask[1:3, 1:4] = 1
        regions = RegionSet.from_masks(mask, mask.copy())
        assert pro(regions, thresholds=None) == pytest.approx(1.0)
        assert pro(regions, thresholds=100) == pytest.approx(1.0)

    def test_inverted_segmentation_is_zero(self):
        mask = np.zeros((4, 4))
        mask[0, 0] = 1
        assert pro(RegionSet.from_masks(mask, 1.0 - mask), thresholds=None) == 0.0

    def test_hand_computed_curve(self):
        mask = np.array([[1, 1, 0, 0]])
        scores = np.array([[0.9, 0.2, 0.5, 0.1]])
        regions = RegionSet.from_masks(mask, scores)
        fpr, overlap = pro_curve(regions, thresholds=None)
        np.testing.assert_allclose(fpr, [0.0, 0.0, 0.5, 0.5, 1.0])
        np.testing.assert_allclose(overlap, [0.0, 0.5, 0.5, 1.0, 1.0])
        # Interpolated to the 0.3 cap: area 0.15, normalized by 0.3.
        assert pro(regions, fpr_limit=0.3, thresholds=None) == pytest.approx(0.5)
        assert pro(regions, fpr_limit=1.0, thresholds=None) == pytest.approx(0.75)

    def test_regions_weigh_equally(self):
        # One large region fully detected, one small region missed.
        mask = np.zeros((1, 12))
        mask[0, :6] = 1
        mask[0, 8] = 1
        scores = np.zeros((1, 12))
        scores[0, :6] = 1.0
        value = pro(RegionSet.from_masks(mask, scores), fpr_limit=1.0, thresholds=None)
        # The missed pixel ties with the background and is only credited at the
        # lowest threshold, where FPR reaches 1.
        assert value == pytest.approx(0.75)

    def test_curve_starts_at_origin(self, rng):
        mask = np.zeros((8, 8))
        mask[2:5, 2:5] = 1
        fpr, overlap = pro_curve(RegionSet.from_masks(mask, rng.normal(size=(8, 8))), 20)
        assert (fpr[0], overlap[0]) == (0.0, 0.0)
        assert len(fpr) == 21
        assert fpr[-1] == 1.0
        assert overlap[-1] == pytest.approx(1.0)

    @pytest.mark.parametrize("fpr_limit", [0.3, 1.0])
    def test_matches_per_threshold_loop(self, fpr_limit):
        rng = np.random.default_rng(5)
        for _ in range(50):
            masks = (rng.random((8, 8)) < 0.3).astype(np.uint8)
            masks[0, 0], masks[7, 7] = 1, 0
            maps = np.round(rng.normal(size=(8, 8)) + masks, 1)
            exact = pro(RegionSet.from_masks(masks, maps), fpr_limit=fpr_limit, thresholds=None)
            assert exact == pytest.approx(_looped_pro(masks, maps, fpr_limit), abs=1e-9)

    def test_no_regions_undefined(self):
        with pytest.raises(UndefinedMetricError, match="region"):
            pro(RegionSet.from_masks(np.zeros((3, 3)), np.zeros((3, 3))))

    def test_invalid_limit(self):
        mask = np.eye(3)
        with pytest.raises(ValueError):
            pro(RegionSet.from_masks(mask, mask), fpr_limit=0.0)


class TestMetricTable:
    def test_ten_named_metrics(self, rng):
        labels = np.array([0, 1, 0, 1])
        masks = np.zeros((4, 4, 4))
        masks[1, 1:3, 1:3] = 1
        masks[3, 0, 0] = 1
        maps = rng.normal(size=masks.shape) + masks
        values, undefined = metric_table(
            ScoredSet(rng.normal(size=4), labels),
            ScoredSet(rng.normal(size=4), labels),
            ScoredSet(maps, masks),
            RegionSet.from_masks(masks, maps),
        )
        assert {level: tuple(v) for level, v in values.items()} == METRIC_NAMES
        assert sum(len(v) for v in values.values()) == 10
        assert undefined == {}

    def test_single_class_reports_null_with_reason(self, rng):
        normal = np.zeros(4)
        masks = np.zeros((4, 3, 3))
        values, undefined = metric_table(
            ScoredSet(rng.normal(size=4), normal),
            ScoredSet(rng.normal(size=4), normal),
            ScoredSet(rng.normal(size=masks.shape), masks),
            RegionSet.from_masks(masks, np.zeros(masks.shape)),
        )
        assert all(v is None for level in values.values() for v in level.values())
        assert set(undefined) == {
            f"{level}.{name}" for level, names in METRIC_NAMES.items() for name in names
        }
