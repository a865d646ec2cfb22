from dataclasses import replace

import numpy as np
import pytest

from kgrerank.config import Toggles
from kgrerank.evaluation import (
    RankingMetrics,
    RetrievalSettings,
    cluster_rank,
    evaluate,
    evidence_features,
    filtered_rank,
    rerank_merge,
)
from kgrerank.kge import Query, init_kge, score_all
from kgrerank.kgstore import build_filter_index
from kgrerank.rerank import IdentityReranker
from kgrerank.retriever import build_index


def scan_ranks(kg, model, split="test"):
    """Per-query filtered ranks by direct comparison of scores."""
    idx = build_filter_index(kg)
    out = []
    for direction in ("tail", "head"):
        for h, r, t in kg.split(split).tolist():
            known, gold = (h, t) if direction == "tail" else (t, h)
            s = score_all(model, Query(known, r, direction))
            others = idx.known(known, r, direction) - {gold}
            ahead = [e for e in range(kg.entity_count) if e not in others and e != gold
                     and (s[e] > s[gold] or (s[e] == s[gold] and e < gold))]
            out.append(len(ahead) + 1)
    return out


class TestMerge:
    def test_identity(self):
        np.testing.assert_array_equal(rerank_merge([5, 2, 9, 1], [5, 2, 9], [0, 1, 2]), [5, 2, 9, 1])

    def test_example(self):
        np.testing.assert_array_equal(rerank_merge([5, 2, 9, 1, 0], [5, 2, 9], [2, 0, 1]), [9, 5, 2, 1, 0])

    def test_tail_untouched(self):
        rng = np.random.default_rng(0)
        first = rng.permutation(50)
        perm = rng.permutation(10)
        out = rerank_merge(first, first[:10], perm)
        assert out[10:].tobytes() == first[10:].tobytes()
        assert sorted(out[:10]) == sorted(first[:10])

    def test_errors(self):
        with pytest.raises(ValueError):
            rerank_merge([1, 2, 3], [1, 2], [0, 0])
        with pytest.raises(ValueError):
            rerank_merge([1, 2, 3], [1, 3], [0, 1])


class TestRanks:
    def test_first(self):
        assert filtered_rank([4, 1, 2], 4, set()) == 1

    def test_filtered_other_answer(self):
        assert filtered_rank([7, 3, 5, 0], 5, {7}) == 2

    def test_fully_filtered(self):
        assert filtered_rank([7, 3, 5], 5, {7, 3}) == 1

    def test_cluster(self):
        order = [9, 8, 7, 6, 1, 0, 2, 3, 4, 5]
        clusters = np.arange(10)
        clusters[7] = clusters[1]
        # member 1 sits at rank 5, member 7 at rank 3, 8 is filtered
        assert cluster_rank(order, clusters[1], clusters, {8}) == 2
        assert cluster_rank(order, clusters[9], clusters, set()) == 1
        assert cluster_rank(order, clusters[4], np.arange(10), set()) == filtered_rank(order, 4, set())

    def test_cluster_requires_data(self):
        with pytest.raises(ValueError):
            cluster_rank([0, 1], 0, None, set())


class TestMetrics:
    def test_perfect(self):
        m = RankingMetrics.from_ranks([1, 1, 1])
        assert (m.mr, m.mrr, m.hits1, m.hits3, m.hits10) == (1, 1, 1, 1, 1)

    def test_values(self):
        m = RankingMetrics.from_ranks([1, 2, 4, 20])
        assert m.mr == pytest.approx(6.75)
        assert m.mrr == pytest.approx((1 + 0.5 + 0.25 + 0.05) / 4)
        assert (m.hits1, m.hits3, m.hits10) == (0.25, 0.5, 0.75)

    def test_json_sorted(self):
        assert RankingMetrics.from_ranks([1]).to_json().startswith('{"hits1"')


class TestEvaluate:
    def test_base_equals_scan(self, synth_kg, synth_kge):
        res = evaluate(synth_kg, synth_kge)
        assert res.ranks.tolist() == scan_ranks(synth_kg, synth_kge)
        assert res.metrics == RankingMetrics.from_ranks(scan_ranks(synth_kg, synth_kge))

    def test_ties_use_index_order(self, synth_kg):
        model = init_kge(synth_kg.entity_count, synth_kg.relation_count, 2, seed=0)
        model.core[:] = 0
        assert evaluate(synth_kg, model).ranks.tolist() == scan_ranks(synth_kg, model)

    def test_identity_reranker(self, synth_kg, synth_kge):
        base = evaluate(synth_kg, synth_kge, K=10).metrics
        same = evaluate(synth_kg, synth_kge, IdentityReranker(), Toggles(qp=False, cp=False), K=10).metrics
        for k, v in base.to_dict().items():
            assert abs(same.to_dict()[k] - v) <= 1e-12

    def test_threads_do_not_change_result(self, synth_kg, synth_kge):
        a = evaluate(synth_kg, synth_kge, chunk=37, threads=1)
        b = evaluate(synth_kg, synth_kge, chunk=37, threads=4)
        np.testing.assert_array_equal(a.ranks, b.ranks)

    def test_unconstrained_counts_outcomes(self, synth_kg, synth_kge):
        res = evaluate(synth_kg, synth_kge, IdentityReranker(), Toggles(cg=False, qp=False, cp=False))
        assert res.outcomes["duplication"] == 2 * len(synth_kg.test)

    def test_cluster_evaluation(self, synth_kg, synth_kge):
        kg = replace(synth_kg, kind="open", cluster_of=np.arange(synth_kg.entity_count))
        np.testing.assert_array_equal(evaluate(kg, synth_kge).ranks, evaluate(synth_kg, synth_kge).ranks)
        merged = kg.cluster_of.copy()
        merged[1::2] -= 1
        coarse = evaluate(replace(kg, cluster_of=merged), synth_kge).ranks
        assert (coarse <= evaluate(kg, synth_kge).ranks).all()

    def test_cluster_request_without_data(self, synth_kg, synth_kge):
        with pytest.raises(ValueError):
            evaluate(synth_kg, synth_kge, use_clusters=True)


class TestEvidence:
    def test_zero_when_disabled(self, synth_kg):
        cand = np.array([[0, 1, 2]])
        ev = evidence_features(synth_kg, [Query(0, 0)], cand, Toggles(qp=False, cp=False),
                               RetrievalSettings(build_index(synth_kg)))
        assert not ev.any()

    def test_training_triple_gets_full_support(self, synth_kg):
        h, r, t = synth_kg.train[0].tolist()
        ev = evidence_features(synth_kg, [Query(h, r)], np.array([[t]]), Toggles(qp=False),
                               RetrievalSettings(build_index(synth_kg)))
        assert ev[0, 0] == pytest.approx(1.0)
