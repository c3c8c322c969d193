import math
import warnings

import numpy as np
import pytest

from pemb import (
    BadConfig,
    DegenerateRange,
    DistanceKind,
    EmbeddingSet,
    EmptyClass,
    MatchTable,
    OutOfRange,
    RankedList,
    UnknownId,
    evaluate,
    map_at_r,
    prompt_filter_eval,
    r_precision,
    rank_by_distance,
    recall_at_k,
    rsum,
    uncertainty_profile,
)
from pemb_testlib import random_set


def ranked(qid, *ids):
    return RankedList(qid, tuple((g, float(i)) for i, g in enumerate(ids)))


class TestRankMetricFixtures:
    def test_alternating_pattern(self):
        # positives at ranks 1 and 3 with R=2: (1/2)(1/1 + 2/3)
        truth = MatchTable(("q",), ("a", "b", "c"), {("q", "a"): 1.0, ("q", "c"): 1.0})
        rl = [ranked("q", "a", "b", "c")]
        assert map_at_r(rl, truth) == pytest.approx(5.0 / 6.0, abs=1e-12)
        assert r_precision(rl, truth) == pytest.approx(0.5)
        assert recall_at_k(rl, truth, 1) == 1.0

    def test_perfect_ranking_both_one(self):
        truth = MatchTable(("q",), ("a", "b", "c"), {("q", "a"): 1.0, ("q", "b"): 1.0})
        rl = [ranked("q", "a", "b", "c")]
        assert map_at_r(rl, truth) == 1.0
        assert r_precision(rl, truth) == 1.0

    def test_one_iff_positives_fill_top_r(self):
        truth = MatchTable(("q",), ("a", "b", "c"), {("q", "a"): 1.0, ("q", "b"): 1.0})
        rl = [ranked("q", "a", "c", "b")]
        assert map_at_r(rl, truth) < 1.0
        assert r_precision(rl, truth) < 1.0

    def test_positive_outside_top_r_scores_zero(self):
        truth = MatchTable(("q",), ("a", "b", "c"), {("q", "c"): 1.0})
        rl = [ranked("q", "a", "b")]  # positive never retrieved
        assert map_at_r(rl, truth) == 0.0
        assert r_precision(rl, truth) == 0.0

    def test_rank_position_recalls(self):
        truth = MatchTable(("q",), tuple("abcdef"), {("q", "c"): 1.0})
        rl = [ranked("q", *"abcdef")]
        assert recall_at_k(rl, truth, 1) == 0.0
        assert recall_at_k(rl, truth, 5) == 1.0


class TestAgainstFullSortOracle:
    def test_random_instances(self):
        rng = np.random.default_rng(7)
        for _ in range(8):
            q_n = int(rng.integers(3, 30))
            g_n = int(rng.integers(8, 120))
            qids = tuple(f"q{i}" for i in range(q_n))
            gids = tuple(f"g{j}" for j in range(g_n))
            rel = {}
            for q in qids:
                for g in rng.choice(g_n, size=int(rng.integers(0, 5)), replace=False):
                    rel[(q, gids[g])] = 1.0
            truth = MatchTable(qids, gids, rel)
            dist = rng.normal(size=(q_n, g_n))
            lists = [
                RankedList(q, tuple(
                    (gids[j], float(dist[i, j]))
                    for j in np.argsort(dist[i], kind="stable")
                ))
                for i, q in enumerate(qids)
            ]
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                rep = evaluate(lists, truth)

            # recompute from scratch
            n_scored = 0
            hits = {1: 0, 5: 0, 10: 0}
            ap = rp = 0.0
            for i, q in enumerate(qids):
                pos = {g for (qq, g), v in rel.items() if qq == q}
                if not pos:
                    continue
                n_scored += 1
                order = [gids[j] for j in np.argsort(dist[i], kind="stable")]
                for k in hits:
                    hits[k] += any(g in pos for g in order[:k])
                r = len(pos)
                seen = acc = 0.0
                for rank0, g in enumerate(order, 1):
                    if g in pos:
                        seen += 1
                        acc += seen / rank0
                ap += acc / r
                rp += sum(g in pos for g in order[:r]) / r

            assert rep.num_queries == n_scored
            for k in hits:
                assert rep.recall_at[k] == pytest.approx(hits[k] / n_scored)
            assert rep.map_at_r == pytest.approx(ap / n_scored)
            assert rep.r_precision == pytest.approx(rp / n_scored)
            assert rep.rsum == pytest.approx(100 * sum(rep.recall_at.values()))

    def test_gallery_relabeling_invariance(self):
        rng = np.random.default_rng(3)
        gids = tuple(f"g{j}" for j in range(40))
        qids = ("q0", "q1", "q2")
        rel = {("q0", "g3"): 1.0, ("q1", "g7"): 1.0, ("q1", "g2"): 1.0, ("q2", "g0"): 1.0}
        dist = rng.normal(size=(3, 40))
        lists = [
            RankedList(q, tuple(
                (gids[j], float(dist[i, j])) for j in np.argsort(dist[i], kind="stable")
            ))
            for i, q in enumerate(qids)
        ]
        r1 = evaluate(lists, MatchTable(qids, gids, rel))
        shuffled = tuple(np.array(gids)[np.random.default_rng(0).permutation(40)])
        r2 = evaluate(lists, MatchTable(qids, shuffled, rel))
        assert r1.to_dict() == r2.to_dict()


class TestReportMechanics:
    def test_skipped_queries_counted_and_warned(self):
        truth = MatchTable(("q1", "q2"), ("a",), {("q1", "a"): 1.0})
        lists = [ranked("q1", "a"), ranked("q2", "a")]
        with pytest.warns(RuntimeWarning):
            rep = evaluate(lists, truth)
        assert rep.num_queries == 1
        assert rep.num_skipped == 1

    def test_rsum_combines_directions(self):
        truth = MatchTable(("q",), ("a",), {("q", "a"): 1.0})
        rep = evaluate([ranked("q", "a")], truth)
        assert rep.rsum == pytest.approx(300.0)
        assert rsum(rep, rep) == pytest.approx(600.0)

    def test_per_query_diagnostics(self):
        truth = MatchTable(("q",), ("a", "b"), {("q", "b"): 1.0})
        rep = evaluate([ranked("q", "a", "b")], truth)
        d = rep.per_query[0]
        assert d.query_id == "q"
        assert d.first_positive_rank == 2
        assert d.num_positives == 1

    def test_ks_guard(self):
        truth = MatchTable(("q",), ("a",), {("q", "a"): 1.0})
        with pytest.raises(OutOfRange):
            evaluate([ranked("q", "a")], truth, ks=())


class TestUncertaintyProfile:
    def _instance(self, n=40, d=3):
        rng = np.random.default_rng(0)
        mu = rng.normal(size=(n, d))
        lv = np.log(np.linspace(0.1, 2.0, n))[:, None].repeat(d, axis=1)
        queries = EmbeddingSet([f"q{i}" for i in range(n)], mu=mu, log_var=lv)
        truth = MatchTable(
            tuple(f"q{i}" for i in range(n)), ("hit", "miss"),
            {(f"q{i}", "hit"): 1.0 for i in range(n)},
        )
        # low-mass half always finds its positive first, high-mass half never
        lists = [
            ranked(f"q{i}", "hit", "miss") if i < n // 2 else ranked(f"q{i}", "miss", "hit")
            for i in range(n)
        ]
        return queries, lists, truth

    def test_anticorrelated_instance(self):
        queries, lists, truth = self._instance()
        prof = uncertainty_profile(queries, lists, truth, num_bins=10)
        assert sum(prof.bin_counts) == 40
        assert len(prof.bin_edges) == 11
        assert prof.bin_mean_recall1[0] == 1.0
        assert prof.bin_mean_recall1[-1] == 0.0
        assert prof.pearson_rho < -0.8
        assert prof.bin_level_rho < -0.8

    def test_constant_mass_degenerate(self):
        queries, lists, truth = self._instance()
        flat = EmbeddingSet(queries.ids, mu=queries.mu, log_var=np.zeros_like(queries.mu))
        with pytest.raises(DegenerateRange):
            uncertainty_profile(flat, lists, truth)

    def test_needs_enough_queries(self):
        queries, lists, truth = self._instance()
        with pytest.raises(OutOfRange):
            uncertainty_profile(queries, lists[:5], truth, num_bins=10)

    def test_json_shape_replaces_nan(self):
        queries, lists, truth = self._instance()
        prof = uncertainty_profile(queries, lists, truth, num_bins=10)
        d = prof.to_dict()
        assert all(v is None or isinstance(v, (int, float)) for v in d["bin_mean_recall1"])


class TestRankByDistance:
    def test_orders_by_distance(self, rng):
        queries = random_set(rng, 3, 4, "q")
        gallery = random_set(rng, 12, 4, "g")
        lists = rank_by_distance(queries, gallery, DistanceKind.CSD)
        assert len(lists) == 3
        for rl in lists:
            assert len(rl.ids) == 12
            assert all(rl.scores[i] <= rl.scores[i + 1] for i in range(11))

    def test_similarity_kind_scores_ascend(self, rng):
        from pemb import McConfig
        queries = random_set(rng, 2, 3, "q")
        gallery = random_set(rng, 6, 3, "g")
        lists = rank_by_distance(
            queries, gallery, DistanceKind.PCME_MATCH_PROB_MC,
            cfg=McConfig(num_samples=64, seed=0), a=5.0, b=5.0,
        )
        for rl in lists:
            assert all(rl.scores[i] <= rl.scores[i + 1] for i in range(5))


def corrupted_prompt_instance():
    rng = np.random.default_rng(11)
    centers = {
        "ant": np.r_[np.ones(4), np.zeros(4)],
        "bee": np.r_[np.zeros(4), np.ones(4)],
        "cow": np.r_[np.ones(2), np.zeros(4), np.ones(2)],
    }
    prompts = {}
    for name, c in sorted(centers.items()):
        mu = c + 0.05 * rng.normal(size=(6, 8))
        lv = np.full((6, 8), np.log(0.5))
        if name == "ant":
            # one prompt points the wrong way and is maximally uncertain
            mu[3] = -c
            lv[3] = np.log(50.0)
        prompts[name] = EmbeddingSet([f"{name}{j}" for j in range(6)], mu=mu, log_var=lv)
    ids, mus, labels = [], [], []
    for name, c in centers.items():
        for j in range(25):
            ids.append(f"im_{name}_{j}")
            mus.append(c + 0.3 * rng.normal(size=8))
            labels.append(name)
    images = EmbeddingSet(ids, mu=np.array(mus), log_var=np.zeros((len(ids), 8)))
    return prompts, images, labels


class TestPromptFilter:
    def test_k_equal_p_matches_all(self):
        prompts, images, labels = corrupted_prompt_instance()
        for cb in ("mu_cosine", "csd"):
            r_all = prompt_filter_eval(prompts, images, labels, "all", classify_by=cb)
            r_top = prompt_filter_eval(
                prompts, images, labels, "topk_uniform", k=6, classify_by=cb
            )
            assert r_top.accuracy == r_all.accuracy
            assert all(v == 6 for v in r_top.chosen_k.values())

    def test_best_topk_never_below_all(self):
        prompts, images, labels = corrupted_prompt_instance()
        for cb in ("mu_cosine", "csd"):
            r_all = prompt_filter_eval(prompts, images, labels, "all", classify_by=cb)
            r_best = prompt_filter_eval(
                prompts, images, labels, "best_topk_per_class", classify_by=cb
            )
            assert r_best.accuracy >= r_all.accuracy

    def test_filtering_strictly_helps_on_corrupted_instance(self):
        prompts, images, labels = corrupted_prompt_instance()
        r_all = prompt_filter_eval(prompts, images, labels, "all", classify_by="csd")
        r_best = prompt_filter_eval(
            prompts, images, labels, "best_topk_per_class", classify_by="csd"
        )
        assert r_best.accuracy > r_all.accuracy
        assert r_best.chosen_k["ant"] < 6  # the corrupted prompt got dropped

    def test_single_prompt_classes_identical_across_strategies(self):
        prompts, images, labels = corrupted_prompt_instance()
        singles = {
            name: EmbeddingSet([name], mu=es.mu[:1], log_var=es.log_var[:1])
            for name, es in prompts.items()
        }
        accs = set()
        for strategy in ("single", "all", "topk_uniform", "best_topk_per_class"):
            k = 1 if strategy == "topk_uniform" else None
            accs.add(prompt_filter_eval(singles, images, labels, strategy, k=k).accuracy)
        assert len(accs) == 1

    def test_uncertainty_ordering_drops_most_uncertain_first(self):
        prompts, images, labels = corrupted_prompt_instance()
        r = prompt_filter_eval(
            prompts, images, labels, "topk_uniform", k=5, classify_by="csd"
        )
        # with the corrupted high-sigma prompt excluded, csd accuracy recovers
        r_all = prompt_filter_eval(prompts, images, labels, "all", classify_by="csd")
        assert r.accuracy >= r_all.accuracy

    def test_mean_only_images_supported(self):
        prompts, images, labels = corrupted_prompt_instance()
        bare = EmbeddingSet(images.ids, mu=images.mu)
        for cb in ("mu_cosine", "csd"):
            rep = prompt_filter_eval(prompts, bare, labels, "all", classify_by=cb)
            assert 0.0 <= rep.accuracy <= 1.0

    def test_deterministic(self):
        prompts, images, labels = corrupted_prompt_instance()
        a = prompt_filter_eval(prompts, images, labels, "best_topk_per_class")
        b = prompt_filter_eval(prompts, images, labels, "best_topk_per_class")
        assert a.to_dict() == b.to_dict()

    def test_validation(self):
        prompts, images, labels = corrupted_prompt_instance()
        with pytest.raises(EmptyClass):
            prompt_filter_eval(
                {"x": EmbeddingSet([], [], dim=8)}, images, ["x"] * len(images), "all"
            )
        with pytest.raises(BadConfig):
            prompt_filter_eval(prompts, images, labels, "all", k=3)
        with pytest.raises(OutOfRange):
            prompt_filter_eval(prompts, images, labels, "topk_uniform")
        with pytest.raises(UnknownId):
            prompt_filter_eval(prompts, images, ["zebra"] * len(images), "all")
        with pytest.raises(BadConfig):
            prompt_filter_eval(prompts, images, labels, "bogus_strategy")
