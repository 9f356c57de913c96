import json
import math

import numpy as np
import pytest

from ibood.score_eval import (
    DegenerateBandwidthError,
    ScoreReport,
    UndefinedMetricError,
    anomaly_score,
    auprc,
    fit_kde,
    separation_ratio,
)


def kde_oracle(support, queries, h):
    """Per-query double loop over the Gaussian kernel sum."""
    m, d = support.shape
    scores = []
    norm = (2 * math.pi * h * h) ** (-d / 2)
    for q in queries:
        density = sum(
            norm * math.exp(-float(((q - s) ** 2).sum()) / (2 * h * h)) for s in support
        ) / m
        scores.append(-math.log(density))
    return np.array(scores)


def auprc_oracle(scores, positives):
    """Brute-force enumeration of every distinct threshold."""
    scores = np.asarray(scores, float)
    positives = np.asarray(positives, bool)
    n_pos = positives.sum()
    thresholds = sorted(set(scores.tolist()), reverse=True)
    terms = []
    prev_recall = 0.0
    for t in thresholds:
        predicted = scores >= t
        tp = int((predicted & positives).sum())
        precision = tp / int(predicted.sum())
        recall = tp / n_pos
        terms.append((recall - prev_recall) * precision)
        prev_recall = recall
    return math.fsum(terms)


class TestFitKde:
    def test_fixed_bandwidth_pass_through(self):
        rng = np.random.default_rng(0)
        model = fit_kde(rng.normal(size=(90, 128)), bandwidth=1.0)
        assert model.bandwidth == 1.0

    def test_scott_rule_scalar_case(self):
        # M=16, d=1, sigma_hat=2 -> h = 16^(-0.2) * 2
        rng = np.random.default_rng(1)
        support = rng.normal(size=(16, 1))
        support = (support - support.mean()) / support.std(ddof=1) * 2.0
        model = fit_kde(support, bandwidth="scott")
        assert model.bandwidth == pytest.approx(16 ** (-0.2) * 2.0, rel=1e-9)
        assert model.bandwidth == pytest.approx(1.1487, abs=2e-4)

    def test_degenerate_support_under_scott(self):
        with pytest.raises(DegenerateBandwidthError):
            fit_kde(np.ones((5, 3)), bandwidth="scott")

    def test_rejects_nonpositive_fixed_bandwidth(self):
        with pytest.raises(DegenerateBandwidthError):
            fit_kde(np.zeros((5, 3)), bandwidth=0.0)


class TestAnomalyScore:
    def test_single_support_point_value(self):
        # query == support point, M=1, d=1, h=1 -> 0.5 * log(2*pi)
        model = fit_kde(np.zeros((1, 1)), bandwidth=1.0)
        score = anomaly_score(model, np.zeros((1, 1)))
        assert score[0] == pytest.approx(0.5 * math.log(2 * math.pi))

    def test_far_query_monotone_and_finite(self):
        model = fit_kde(np.zeros((4, 2)), bandwidth=1.0)
        distances = [1.0, 10.0, 50.0, 1e4]
        scores = [
            anomaly_score(model, np.array([[r, 0.0]]))[0] for r in distances
        ]
        assert all(np.isfinite(scores))
        assert scores == sorted(scores)

    def test_duplicated_support_identical_scores(self):
        rng = np.random.default_rng(2)
        support = rng.normal(size=(8, 3))
        queries = rng.normal(size=(5, 3))
        a = anomaly_score(fit_kde(support, 0.8), queries)
        b = anomaly_score(fit_kde(np.vstack([support, support]), 0.8), queries)
        assert a == pytest.approx(b, rel=1e-12)

    @pytest.mark.parametrize("m,d,seed", [(3, 1, 0), (16, 4, 1), (64, 8, 2)])
    def test_matches_double_loop_oracle(self, m, d, seed):
        rng = np.random.default_rng(seed)
        support = rng.normal(size=(m, d))
        queries = rng.normal(size=(10, d)) * 2
        h = 0.9
        got = anomaly_score(fit_kde(support, h), queries)
        want = kde_oracle(support, queries, h)
        assert got == pytest.approx(want, rel=1e-6)

    def test_radial_monotonicity_single_cluster(self):
        rng = np.random.default_rng(3)
        support = rng.normal(size=(30, 2)) * 0.5
        center = support.mean(0)
        model = fit_kde(support, 1.0)
        radii = np.linspace(0, 20, 40)
        direction = np.array([1.0, 0.3])
        direction /= np.linalg.norm(direction)
        scores = anomaly_score(model, center + radii[:, None] * direction)
        assert np.all(np.diff(scores) >= -1e-9)

    def test_dimension_mismatch(self):
        model = fit_kde(np.zeros((3, 2)), 1.0)
        with pytest.raises(ValueError):
            anomaly_score(model, np.zeros((3, 5)))


class TestAuprc:
    def test_perfect_ranking(self):
        scores = np.array([5.0, 4.0, 3.0, 1.0, 0.5])
        positives = np.array([1, 1, 0, 0, 0], bool)
        _, area = auprc(scores, positives)
        assert area == pytest.approx(1.0)

    def test_four_point_hand_case(self):
        _, area = auprc(np.array([0.9, 0.8, 0.7, 0.6]), np.array([1, 0, 1, 0], bool))
        assert area == pytest.approx(0.5 * (1.0 + 2.0 / 3.0))

    @pytest.mark.parametrize("q,seed", [(10, 0), (57, 1), (100, 2), (100, 3)])
    def test_matches_brute_force_oracle(self, q, seed):
        rng = np.random.default_rng(seed)
        scores = np.round(rng.normal(size=q), 1)  # rounding forces ties
        positives = rng.random(q) < 0.3
        if positives.all() or not positives.any():
            positives[0] = True
            positives[1] = False
        _, area = auprc(scores, positives)
        assert area == auprc_oracle(scores, positives)

    def test_random_scores_approach_positive_rate(self):
        rng = np.random.default_rng(4)
        p = 0.15
        areas = []
        for _ in range(10):
            q = 10_000
            scores = rng.random(q)
            positives = rng.random(q) < p
            _, area = auprc(scores, positives)
            areas.append(area)
        assert np.mean(areas) == pytest.approx(p, abs=0.02)

    def test_invariance_under_increasing_transform(self):
        rng = np.random.default_rng(5)
        scores = rng.normal(size=200)
        positives = rng.random(200) < 0.2
        _, base = auprc(scores, positives)
        for transform in (np.exp, np.tanh, lambda s: 3 * s + 7):
            _, area = auprc(transform(scores), positives)
            assert area == pytest.approx(base, abs=1e-12)

    def test_recall_nondecreasing_along_curve(self):
        rng = np.random.default_rng(6)
        curve, _ = auprc(rng.normal(size=50), rng.random(50) < 0.4)
        recalls = [r for r, _ in curve]
        assert recalls == sorted(recalls)

    def test_degenerate_labels_rejected(self):
        with pytest.raises(UndefinedMetricError):
            auprc(np.array([1.0, 2.0]), np.array([True, True]))
        with pytest.raises(UndefinedMetricError):
            auprc(np.array([1.0, 2.0]), np.array([False, False]))


class TestSeparationRatio:
    def test_collapsed_classes_report_inf(self):
        z = np.array([[0.0, 0.0], [0.0, 0.0], [5.0, 0.0], [5.0, 0.0]])
        y = np.array([0, 0, 1, 1])
        assert separation_ratio(z, y, [0, 1]) == float("inf")

    def test_two_spherical_clusters_monte_carlo(self):
        # centroids 10 apart, unit-variance 2-D clusters:
        # E||x - mu|| = sqrt(pi/2) ~ 1.2533, so ratio ~ 7.98
        rng = np.random.default_rng(7)
        n = 100_000
        a = rng.normal(size=(n, 2))
        b = rng.normal(size=(n, 2)) + np.array([10.0, 0.0])
        z = np.vstack([a, b])
        y = np.repeat([0, 1], n)
        got = separation_ratio(z, y, [0, 1])
        assert got == pytest.approx(10.0 / math.sqrt(math.pi / 2), rel=0.01)

    def test_permutation_invariance(self):
        rng = np.random.default_rng(8)
        z = rng.normal(size=(60, 3))
        y = rng.integers(0, 3, 60)
        perm = rng.permutation(60)
        assert separation_ratio(z, y, [0, 1, 2]) == pytest.approx(
            separation_ratio(z[perm], y[perm], [0, 1, 2])
        )

    def test_translation_and_scale_behavior(self):
        rng = np.random.default_rng(9)
        z = rng.normal(size=(40, 2)) + np.repeat([[0, 0], [4, 4]], 20, axis=0)
        y = np.repeat([0, 1], 20)
        base = separation_ratio(z, y, [0, 1])
        shifted = separation_ratio(z + 100.0, y, [0, 1])
        scaled = separation_ratio(z * 13.0, y, [0, 1])
        assert shifted == pytest.approx(base, rel=1e-9)
        assert scaled == pytest.approx(base, rel=1e-9)

    def test_needs_two_classes(self):
        with pytest.raises(ValueError):
            separation_ratio(np.zeros((4, 2)), np.zeros(4), [0])


class TestScoreReport:
    def test_json_round_trip(self):
        report = ScoreReport(
            ood_class=8,
            scores=[0.5, 2.0],
            is_ood=[False, True],
            curve=[(0.5, 1.0), (1.0, 1.0)],
            auprc=1.0,
            separation=3.25,
            bandwidth=0.7,
        )
        back = ScoreReport.from_json(report.to_json())
        assert back == report

    def test_inf_separation_survives_serialization(self):
        report = ScoreReport(8, [1.0], [True], [(1.0, 1.0)], 1.0, float("inf"), 1.0)
        assert ScoreReport.from_json(report.to_json()).separation == float("inf")

    def test_schema_version_mismatch(self):
        payload = json.loads(
            ScoreReport(8, [1.0], [True], [], 1.0, 1.0, 1.0).to_json()
        )
        payload["schema_version"] = 99
        with pytest.raises(ValueError, match="schema version"):
            ScoreReport.from_json(json.dumps(payload), source="bad.json")
