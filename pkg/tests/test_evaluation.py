"""Ranking, CMC, and mAP against brute-force enumeration oracles."""
import itertools
import os

import numpy as np
import pytest

from reidlab import evaluation as ev


def bf_average_precision(pattern):
    """Straight-loop AP: precision at each relevant rank, averaged."""
    hits, precisions = 0, []
    for rank, rel in enumerate(pattern, start=1):
        if rel:
            hits += 1
            precisions.append(hits / rank)
    return sum(precisions) / len(precisions) if precisions else 0.0


def bf_cmc(patterns, k_max):
    out = np.zeros(k_max)
    for k in range(1, k_max + 1):
        out[k - 1] = sum(1 for p in patterns if any(p[:k])) / len(patterns)
    return out


def _result(pattern):
    pattern = np.asarray(pattern, dtype=bool)
    return ev.RankedResult(0, np.arange(len(pattern)), pattern)


class TestAveragePrecision:
    def test_frozen_example_ranks_1_and_3_of_4(self):
        ap = ev.average_precision(np.array([True, False, True, False]))
        assert ap == pytest.approx((1.0 + 2.0 / 3.0) / 2.0, abs=1e-9)
        assert ap == pytest.approx(0.83333333, abs=1e-7)

    def test_perfect_ranking(self):
        assert ev.mean_ap([_result([True, True, False])]) == 1.0

    def test_single_relevant_at_rank_r(self):
        for r in range(1, 7):
            pattern = np.zeros(6, dtype=bool)
            pattern[r - 1] = True
            assert ev.average_precision(pattern) == pytest.approx(1.0 / r, abs=1e-15)

    def test_exhaustive_galleries_match_brute_force(self):
        # every relevance pattern over every gallery size up to 6
        for g in range(1, 7):
            for bits in range(1, 2**g):
                pattern = [(bits >> i) & 1 == 1 for i in range(g)]
                got = ev.average_precision(np.array(pattern))
                assert got == bf_average_precision(pattern)


class TestCmc:
    def test_match_at_rank_three(self):
        curve = ev.cmc_curve([_result([False, False, True, False])], k_max=5)
        np.testing.assert_array_equal(curve, [0, 0, 1, 1, 1])

    def test_all_rank_one(self):
        rs = [_result([True, False]), _result([True, True])]
        np.testing.assert_array_equal(ev.cmc_curve(rs, 3), np.ones(3))

    def test_monotone_and_bounded(self):
        rng = np.random.default_rng(0)
        rs = []
        for _ in range(50):
            pattern = rng.random(6) < 0.3
            if pattern.any():
                rs.append(_result(pattern))
        curve = ev.cmc_curve(rs, 6)
        assert np.all(np.diff(curve) >= 0)
        assert np.all((curve >= 0) & (curve <= 1))

    def test_exhaustive_galleries_match_brute_force(self):
        for g in range(1, 7):
            patterns = []
            for bits in range(1, 2**g):
                patterns.append([(bits >> i) & 1 == 1 for i in range(g)])
            rs = [_result(p) for p in patterns]
            got = ev.cmc_curve(rs, g)
            np.testing.assert_array_equal(got, bf_cmc(patterns, g))


class TestRankGallery:
    def test_duplicate_embedding_ranks_first(self):
        rng = np.random.default_rng(1)
        g = rng.normal(size=(10, 4))
        q = g[7] * 3.0  # same direction, different norm
        sims = ev.cosine_similarities(q[None], g)[0]
        order = ev.rank_gallery(sims, np.arange(10))
        assert order[0] == 7

    def test_all_equal_similarities_give_index_order(self):
        sims = np.zeros(6)
        order = ev.rank_gallery(sims, np.arange(6))
        np.testing.assert_array_equal(order, np.arange(6))

    def test_matches_brute_force_sort(self):
        rng = np.random.default_rng(2)
        sims = rng.normal(size=10)
        order = ev.rank_gallery(sims, np.arange(10))
        oracle = sorted(range(10), key=lambda i: (-sims[i], i))
        np.testing.assert_array_equal(order, oracle)

    def test_monotone_transform_leaves_order_unchanged(self):
        rng = np.random.default_rng(3)
        sims = rng.normal(size=12)
        base = ev.rank_gallery(sims, np.arange(12))
        warped = ev.rank_gallery(3.0 * sims + 1.0, np.arange(12))
        np.testing.assert_array_equal(base, warped)


class TestEvaluate:
    def _toy(self):
        # 2 queries; gallery: same-id same-cam (excluded), same-id cross-cam
        # (relevant), distractors
        q = np.array([[1.0, 0.0], [0.0, 1.0]])
        q_ids = np.array([0, 1])
        q_cams = np.array([0, 0])
        g = np.array([[1.0, 0.1], [0.9, 0.2], [0.1, 1.0], [-1.0, 0.3], [0.5, 0.5]])
        g_ids = np.array([0, 0, 1, 2, 2])
        g_cams = np.array([0, 1, 1, 0, 1])
        return q, q_ids, q_cams, g, g_ids, g_cams

    def test_same_camera_same_id_excluded(self):
        q, qi, qc, g, gi, gc = self._toy()
        report, results = ev.evaluate(q, qi, qc, g, gi, gc, k_max=4)
        # query 0's same-cam duplicate (gallery 0) must not appear
        assert 0 not in results[0].order
        assert len(results[0].order) == 4
        assert report.num_queries == 2 and report.num_skipped == 0

    def test_relevance_is_cross_camera_same_id(self):
        q, qi, qc, g, gi, gc = self._toy()
        _, results = ev.evaluate(q, qi, qc, g, gi, gc)
        r0 = results[0]
        np.testing.assert_array_equal(r0.relevant, gi[r0.order] == 0)

    def test_query_without_relevant_is_skipped_and_counted(self):
        q = np.array([[1.0, 0.0]])
        report, results = ev.evaluate(
            q, np.array([9]), np.array([0]),
            np.array([[1.0, 0.0], [0.0, 1.0]]), np.array([1, 2]), np.array([0, 1]),
        )
        assert results == []
        assert report.num_skipped == 1 and report.num_queries == 0

    def test_random_rank1_matches_exhaustive_permutations(self):
        # G=4 with 2 relevant: enumerate all 24 orders -> P(top is relevant)
        pattern = np.array([True, False, True, False])
        exact = np.mean([
            pattern[list(perm)][0]
            for perm in itertools.permutations(range(4))
        ])
        got = ev.random_rank1([_result(pattern)])
        assert got == pytest.approx(float(exact), abs=1e-15)
        assert got == pytest.approx(0.5, abs=1e-15)

    def test_zero_norm_embedding_does_not_blow_up(self):
        sims = ev.cosine_similarities(np.zeros((1, 3)), np.ones((2, 3)))
        assert np.all(np.isfinite(sims))


class TestRerank:
    def test_oracle_pair_score_moves_relevant_up(self):
        base = ev.RankedResult(
            0, np.array([4, 2, 7, 1]), np.array([False, False, True, True])
        )
        truth = {7, 1}
        new = ev.rerank_top([base], lambda q, g: 1.0 if g in truth else 0.0, top_r=4)[0]
        np.testing.assert_array_equal(new.order[:2], [1, 7])  # ties: index ascending
        np.testing.assert_array_equal(new.relevant, [True, True, False, False])

    def test_entries_past_top_r_keep_rank(self):
        base = ev.RankedResult(
            0, np.array([3, 1, 5, 2]), np.array([False, True, False, True])
        )
        new = ev.rerank_top([base], lambda q, g: float(g), top_r=2)[0]
        # head [3, 1] already score-descending; tail untouched
        np.testing.assert_array_equal(new.order, [3, 1, 5, 2])
        np.testing.assert_array_equal(new.relevant, base.relevant)


def test_report_files(tmp_path):
    rs = [_result([True, False, True])]
    report = ev.report_from_results(rs, num_skipped=1, k_max=3)
    ev.write_report(report, str(tmp_path), results=rs)
    csv = (tmp_path / "eval_report.csv").read_text().splitlines()
    assert csv[0] == "metric,value"
    assert any(line.startswith("mAP,") for line in csv)
    assert (tmp_path / "eval_report.txt").exists()
    ranked = (tmp_path / "ranked_lists.csv").read_text().splitlines()
    assert ranked[0] == "query_index,rank,gallery_index,relevant"
    assert len(ranked) == 4
