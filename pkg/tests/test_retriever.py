import sys

import numpy as np
import pytest

from kgrerank.kgstore import KnowledgeGraph
from kgrerank.retriever import (
    DEFAULT_K_C,
    DEFAULT_K_Q,
    DEFAULT_THETA,
    HashingEmbedder,
    ProcessEmbedder,
    TrainingTextIndex,
    build_index,
    candidate_supporting_prompt,
    query_related_prompt,
    retrieve,
    retrieve_vec,
)


def index_of(texts, width=512):
    emb = HashingEmbedder(width)
    return TrainingTextIndex(list(texts), emb.embed_many(texts), emb)


def scan(index, text, k, theta=None):
    q = index.embedder.embed(text)
    sims = [float(np.dot(row, q)) for row in index.embeddings]
    order = sorted(range(len(sims)), key=lambda i: (-sims[i], i))[:k]
    return [(index.sequences[i], sims[i]) for i in order if theta is None or sims[i] >= theta]


TEXTS = [f"entity {w} relation {v}" for w, v in zip("abcdefghij", "klmnopqrst")]


class TestEmbedder:
    def test_unit_norm_and_stable(self):
        emb = HashingEmbedder()
        v = emb.embed("Jackie Chan played in movie Ip Man")
        assert np.linalg.norm(v) == pytest.approx(1.0)
        assert v.tobytes() == emb.embed("Jackie Chan played in movie Ip Man").tobytes()

    def test_empty_text_is_zero(self):
        assert not HashingEmbedder().embed("").any()

    def test_process_adapter(self, tmp_path):
        script = tmp_path / "enc.py"
        script.write_text(
            "import sys\n"
            "for line in sys.stdin:\n"
            "    print(len(line.strip()), 1.0, flush=True)\n"
        )
        emb = ProcessEmbedder([sys.executable, str(script)])
        try:
            v = emb.embed("abc")
            np.testing.assert_allclose(v, np.array([3.0, 1.0]) / np.sqrt(10))
            assert emb.embed_many(["a", "bb"]).shape == (2, 2)
        finally:
            emb.close()


class TestIndex:
    def test_row_per_training_triple(self, tiny_kg):
        index = build_index(tiny_kg)
        assert len(index) == 3
        assert index.sequences[0] == "Jackie Chan played in movie Ip Man?"

    def test_duplicates_kept(self):
        z = np.zeros((0, 3), np.int64)
        kg = KnowledgeGraph(["a", "b"], ["r"], np.array([[0, 0, 1], [0, 0, 1]]), z, z)
        assert len(build_index(kg)) == 2


class TestRetrieve:
    def test_self_similarity_first(self):
        index = index_of(TEXTS)
        seq, sim = retrieve(index, TEXTS[4], 3)[0]
        assert seq == TEXTS[4]
        assert sim == pytest.approx(1.0)

    def test_matches_scan(self):
        index = index_of(TEXTS)
        for q in ("entity c relation x", "relation q", "b a"):
            got = retrieve(index, q, 3)
            want = scan(index, q, 3)
            assert [s for s, _ in got] == [s for s, _ in want]
            np.testing.assert_allclose([x for _, x in got], [x for _, x in want], atol=1e-12)

    def test_sorted_and_threshold(self):
        index = index_of(TEXTS)
        got = retrieve(index, "entity c relation m", 10, theta=0.3)
        sims = [s for _, s in got]
        assert sims == sorted(sims, reverse=True)
        assert all(s >= 0.3 for s in sims)

    def test_all_rows(self):
        assert len(retrieve(index_of(TEXTS), "x", len(TEXTS), theta=0.0)) == len(TEXTS)

    def test_domain_errors(self):
        index = index_of(TEXTS)
        with pytest.raises(ValueError):
            retrieve(index, "x", 3, theta=1.0 + 1e-9)
        with pytest.raises(ValueError):
            retrieve_vec(index, index.embedder.embed("x"), 0)


class TestPrompts:
    def test_defaults(self):
        assert (DEFAULT_K_Q, DEFAULT_K_C, DEFAULT_THETA) == (3, 3, 0.8)

    def test_empty_index(self):
        index = index_of([])
        assert query_related_prompt(index, "q") == ""
        assert candidate_supporting_prompt(index, ["a", "b"]) == ""

    def test_query_prompt_is_top3(self):
        index = index_of(TEXTS[:5])
        want = scan(index, "entity b relation l", 3)
        assert query_related_prompt(index, "entity b relation l") == ". ".join(s for s, _ in want)

    def test_candidate_prompt_threshold(self):
        index = index_of(TEXTS)
        assert candidate_supporting_prompt(index, ["zzz yyy", "qqq"]) == ""
        text = candidate_supporting_prompt(index, ["nothing here", TEXTS[2]])
        assert text.startswith(f"B. {TEXTS[2]}")
