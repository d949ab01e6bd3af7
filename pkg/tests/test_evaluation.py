"""Tests for verification metrics, the probe, and the rank-sum test."""

import itertools

import numpy as np
import pytest

from adasample.data import DatasetSpec, generate_synthetic
from adasample.errors import UndefinedCorrelationError
from adasample.evaluation import (EvalReport, fpr_at_recall,
                                  info_correlation_probe, mann_whitney_u,
                                  pearson, retrieval_map)
from adasample.metricspace import MetricKind
from adasample.tensornet import init_params


def brute_force_fpr(pos, neg, recall):
    """Sweep every positive distance as a threshold candidate and take the
    smallest one reaching the recall."""
    best = None
    for t in sorted(pos):
        if np.mean(pos <= t) >= recall:
            best = t
            break
    return float(np.mean(neg <= best))


class TestFprAtRecall:
    def test_perfect_separation_gives_zero(self):
        assert fpr_at_recall(np.array([0.1, 0.2]), np.array([0.5, 0.9])) == 0.0

    def test_total_inversion_gives_one(self):
        pos = np.array([1.0, 1.1, 1.2, 1.3])
        neg = np.array([0.1, 0.2, 0.3])
        assert fpr_at_recall(pos, neg, 0.95) == 1.0

    def test_matches_brute_force_sweep(self):
        pos = np.arange(1, 21) * 0.1
        neg = np.arange(1, 21) * 0.5 * 0.2 + 0.05
        got = fpr_at_recall(pos, neg, 0.95)
        assert got == pytest.approx(brute_force_fpr(pos, neg, 0.95))

    def test_matches_brute_force_on_random_samples(self):
        rng = np.random.default_rng(32)
        for _ in range(100):
            pos = rng.uniform(0, 2, size=rng.integers(5, 40))
            neg = rng.uniform(0, 2, size=rng.integers(5, 40))
            for recall in (0.5, 0.8, 0.95, 1.0):
                assert fpr_at_recall(pos, neg, recall) == pytest.approx(
                    brute_force_fpr(pos, neg, recall))

    def test_monotone_in_recall(self):
        rng = np.random.default_rng(33)
        pos = rng.uniform(0, 1, size=50)
        neg = rng.uniform(0, 1, size=50)
        values = [fpr_at_recall(pos, neg, r)
                  for r in np.linspace(0.05, 1.0, 20)]
        assert all(a <= b + 1e-15 for a, b in zip(values, values[1:]))

    def test_empty_inputs_rejected(self):
        with pytest.raises(ValueError):
            fpr_at_recall(np.array([]), np.array([1.0]))


def brute_force_ap(dists, relevant):
    order = np.argsort(dists, kind="stable")
    hits = 0
    precisions = []
    for rank, idx in enumerate(order, start=1):
        if relevant[idx]:
            hits += 1
            precisions.append(hits / rank)
    return float(np.mean(precisions)) if precisions else float("nan")


class TestRetrievalMap:
    def unit(self, v):
        v = np.asarray(v, dtype=np.float64)
        return v / np.linalg.norm(v)

    def test_all_matches_first_gives_one(self):
        q = np.eye(3)
        g = np.vstack([np.eye(3), self.unit([1.0, 1.0, 1.0])])
        res = retrieval_map(q, [0, 1, 2], g, [0, 1, 2, 99],
                            MetricKind.ANGULAR)
        assert res.mean_ap == pytest.approx(1.0)
        assert res.num_excluded == 0

    def test_single_relevant_at_second_rank(self):
        q = np.array([[1.0, 0.0]])
        g = np.array([[np.cos(0.1), np.sin(0.1)],
                      [np.cos(0.7), np.sin(0.7)]])
        res = retrieval_map(q, [5], g, [3, 5], MetricKind.ANGULAR)
        assert res.mean_ap == pytest.approx(0.5)

    def test_matches_brute_force_average_precision(self):
        rng = np.random.default_rng(34)
        Q = rng.normal(size=(10, 5))
        Q /= np.linalg.norm(Q, axis=1, keepdims=True)
        G = rng.normal(size=(30, 5))
        G /= np.linalg.norm(G, axis=1, keepdims=True)
        ql = rng.integers(0, 4, size=10)
        gl = rng.integers(0, 4, size=30)
        res = retrieval_map(Q, ql, G, gl, MetricKind.EUCLIDEAN)
        aps = []
        from adasample.metricspace import pairwise_distances
        D = pairwise_distances(Q, G, MetricKind.EUCLIDEAN)
        for i in range(10):
            rel = gl == ql[i]
            if rel.any():
                aps.append(brute_force_ap(D[i], rel))
        assert res.mean_ap == pytest.approx(np.mean(aps))

    def test_unmatched_queries_are_excluded_and_counted(self):
        q = np.eye(2)
        g = np.eye(2)
        res = retrieval_map(q, [0, 7], g, [0, 1], MetricKind.ANGULAR)
        assert res.num_excluded == 1
        assert res.num_queries == 1

    def test_invariant_under_monotone_distance_transform(self):
        """Rank-based, so squashing the metric cannot change the result."""
        rng = np.random.default_rng(35)
        Q = rng.normal(size=(6, 4))
        Q /= np.linalg.norm(Q, axis=1, keepdims=True)
        G = rng.normal(size=(20, 4))
        G /= np.linalg.norm(G, axis=1, keepdims=True)
        ql = rng.integers(0, 3, size=6)
        gl = rng.integers(0, 3, size=20)
        # euclidean and angular are monotone transforms of one another on
        # the sphere, so the mean AP must agree exactly
        r1 = retrieval_map(Q, ql, G, gl, MetricKind.EUCLIDEAN)
        r2 = retrieval_map(Q, ql, G, gl, MetricKind.ANGULAR)
        assert r1.mean_ap == pytest.approx(r2.mean_ap, abs=1e-12)


class TestPearson:
    def test_affine_relation_gives_one(self):
        x = np.array([1.0, 2.0, 3.0, 4.0])
        assert pearson(x, 2 * x + 1) == pytest.approx(1.0)

    def test_negation_gives_minus_one(self):
        x = np.array([1.0, 2.0, 3.0])
        assert pearson(x, -x) == pytest.approx(-1.0)

    def test_five_point_closed_form(self):
        x = np.array([1.0, 2.0, 3.0, 4.0, 5.0])
        y = np.array([2.0, 1.0, 4.0, 3.0, 5.0])
        xc, yc = x - x.mean(), y - y.mean()
        expected = float(xc @ yc / np.sqrt((xc @ xc) * (yc @ yc)))
        assert pearson(x, y) == pytest.approx(expected, abs=1e-12)

    def test_invariant_under_positive_affine_maps(self):
        rng = np.random.default_rng(36)
        x = rng.normal(size=30)
        y = rng.normal(size=30)
        base = pearson(x, y)
        assert pearson(3.0 * x + 5.0, y) == pytest.approx(base, abs=1e-12)
        assert pearson(x, 0.25 * y - 2.0) == pytest.approx(base, abs=1e-12)

    def test_zero_variance_rejected(self):
        with pytest.raises(UndefinedCorrelationError):
            pearson(np.ones(4), np.arange(4.0))


class TestInfoCorrelationProbe:
    def probe_dataset(self, **kw):
        base = dict(num_classes=10, patches_per_class=4, patch_size=8,
                    outlier_fraction=0.0, seed=40)
        base.update(kw)
        return generate_synthetic(DatasetSpec(**base))

    def test_output_lengths_match_candidate_count(self):
        ds = self.probe_dataset()
        params = init_params([64, 16, 8], seed=2)
        res = info_correlation_probe(ds, params, MetricKind.ANGULAR,
                                     np.random.default_rng(0),
                                     sample_classes=6)
        assert res.p_dist.shape == res.p_info.shape == (6 * 3,)

    def test_constant_output_across_candidates_is_degenerate(self):
        """Classes whose views are identical produce no ordering signal, so
        the probe flags the correlation as undefined."""
        ds = self.probe_dataset(warp_magnitude=0.0, noise_sigma=0.0,
                                brightness_jitter=0.0)
        params = init_params([64, 16, 8], seed=2)
        res = info_correlation_probe(ds, params, MetricKind.ANGULAR,
                                     np.random.default_rng(0),
                                     sample_classes=5)
        assert res.degenerate
        assert np.isnan(res.pearson)

    def test_near_proportional_case_correlates(self):
        """Probed on the squared matching distance alone, the gradient norm
        is close to proportional to the distance (the leftover variation is
        per-sample Jacobian anisotropy), so the correlation approaches 1."""
        ds = self.probe_dataset(warp_magnitude=3.0, noise_sigma=0.01,
                                brightness_jitter=0.01)
        params = init_params([64, 24, 8], seed=3)
        res = info_correlation_probe(ds, params, MetricKind.EUCLIDEAN,
                                     np.random.default_rng(1),
                                     sample_classes=8, pair_term_only=True)
        assert not res.degenerate
        assert res.pearson > 0.95

    def test_deterministic_given_rng(self):
        ds = self.probe_dataset()
        params = init_params([64, 16, 8], seed=2)
        r1 = info_correlation_probe(ds, params, MetricKind.ANGULAR,
                                    np.random.default_rng(5), sample_classes=4)
        r2 = info_correlation_probe(ds, params, MetricKind.ANGULAR,
                                    np.random.default_rng(5), sample_classes=4)
        assert np.array_equal(r1.p_dist, r2.p_dist)
        assert np.array_equal(r1.p_info, r2.p_info)


def enumerate_exact_p(a, b):
    """Oracle: P(U <= U_obs) by enumerating every assignment of the pooled
    values to the first sample."""
    pooled = np.concatenate([a, b])
    n1 = len(a)

    def u_of(idx):
        mask = np.zeros(len(pooled), dtype=bool)
        mask[list(idx)] = True
        x, y = pooled[mask], pooled[~mask]
        return (x[:, None] > y[None, :]).sum() + 0.5 * (x[:, None] == y[None, :]).sum()

    u_obs = u_of(range(n1))
    us = [u_of(c) for c in itertools.combinations(range(len(pooled)), n1)]
    return float(np.mean([u <= u_obs + 1e-12 for u in us]))


class TestMannWhitney:
    def test_clean_separation_two_vs_two(self):
        res = mann_whitney_u([1.0, 2.0], [3.0, 4.0])
        assert res.exact
        assert res.u == 0.0
        assert res.p_value == pytest.approx(1 / 6)

    def test_clean_separation_five_vs_five(self):
        res = mann_whitney_u(np.arange(1.0, 6.0), np.arange(6.0, 11.0))
        assert res.u == 0.0
        assert res.p_value == pytest.approx(1 / 252)

    def test_identical_large_samples_sit_near_half(self):
        x = np.arange(15.0)
        res = mann_whitney_u(x, x.copy())
        assert not res.exact
        assert res.p_value == pytest.approx(0.5, abs=0.05)

    def test_exact_branch_matches_enumeration_small_samples(self):
        rng = np.random.default_rng(37)
        for _ in range(40):
            n1 = int(rng.integers(1, 6))
            n2 = int(rng.integers(1, 11 - n1))
            a = rng.integers(0, 6, size=n1).astype(float)   # ties likely
            b = rng.integers(0, 6, size=n2).astype(float)
            res = mann_whitney_u(a, b)
            assert res.exact
            assert res.p_value == pytest.approx(enumerate_exact_p(a, b),
                                                abs=1e-12)

    def test_exact_branch_matches_enumeration_without_ties(self):
        rng = np.random.default_rng(38)
        for _ in range(30):
            n1 = int(rng.integers(2, 6))
            n2 = int(rng.integers(2, 11 - n1))
            pool = rng.permutation(100)[:n1 + n2].astype(float)
            a, b = pool[:n1], pool[n1:]
            res = mann_whitney_u(a, b)
            assert res.exact
            assert res.p_value == pytest.approx(enumerate_exact_p(a, b),
                                                abs=1e-12)

    def test_exact_and_normal_agree_at_the_boundary(self):
        """At pooled size 20 the exact and approximate branches land within
        0.02 of each other on continuous data."""
        rng = np.random.default_rng(39)
        for _ in range(25):
            a = rng.normal(size=10)
            b = rng.normal(loc=rng.uniform(-1, 1), size=10)
            exact = mann_whitney_u(a, b)
            assert exact.exact
            # force the normal branch by replicating the geometry: compute
            # it directly from the same statistic
            from adasample.evaluation import _u_statistic
            import scipy.special as sp
            u = _u_statistic(a, b)
            mean = 100 / 2.0
            var = 100 * 21 / 12.0
            approx = float(sp.ndtr((u - mean + 0.5) / np.sqrt(var)))
            assert abs(exact.p_value - approx) < 0.02

    def test_one_sided_direction(self):
        low = [0.1, 0.2, 0.3, 0.35, 0.15]
        high = [0.5, 0.6, 0.7, 0.65, 0.55]
        assert mann_whitney_u(low, high).p_value < 0.05
        assert mann_whitney_u(high, low).p_value > 0.9

    def test_empty_sample_rejected(self):
        with pytest.raises(ValueError):
            mann_whitney_u([], [1.0])


class TestEvalReport:
    def test_kv_text_round_trips_fields(self):
        rep = EvalReport(fpr95=0.125, retrieval_map=0.75,
                         pearson_info_dist=0.9)
        text = rep.to_kv_text()
        assert "fpr95 = 0.125000" in text
        assert "retrieval_map = 0.750000" in text
        assert "pearson_info_dist = 0.900000" in text

    def test_csv_row_handles_missing_probe(self):
        rep = EvalReport(fpr95=0.2, retrieval_map=0.5)
        row = rep.csv_row()
        assert row["pearson_info_dist"] == ""
