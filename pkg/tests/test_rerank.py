import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kgrerank.kge import Query
from kgrerank.rerank import (
    IdentityReranker,
    LossConfig,
    RerankerModel,
    build_training_samples,
    build_vocab,
    ce_loss,
    encode_samples,
    make_sample,
    mean_loss,
    minmax_backward,
    minmax_scale,
    ranking_loss,
    sample_arrays,
    target_order,
    total_loss,
    train_reranker,
)


def pair_oracle(p, s, C=100.0):
    K = len(p)
    return C / K**2 * sum(max(0.0, p[i] - p[j]) for i in range(K) for j in range(K) if s[i] < s[j])


def pl_oracle(z, order):
    rem = list(range(len(z)))
    out = 0.0
    for pos in order:
        out += math.log(sum(math.exp(z[i]) for i in rem)) - z[pos]
        rem.remove(pos)
    return out


class TestMinMax:
    def test_examples(self):
        np.testing.assert_array_equal(minmax_scale([0, 1]), [0, 1])
        np.testing.assert_array_equal(minmax_scale([3, 1, 2]), [1.0, 0.0, 0.5])
        np.testing.assert_array_equal(minmax_scale([2, 2, 2]), [0.5, 0.5, 0.5])

    def test_backward_finite_difference(self):
        rng = np.random.default_rng(0)
        z = rng.normal(size=(3, 6))
        g = rng.normal(size=(3, 6))
        dz = minmax_backward(z, minmax_scale(z), g)
        h = 1e-6
        for b in range(3):
            for k in range(6):
                zp, zm = z.copy(), z.copy()
                zp[b, k] += h
                zm[b, k] -= h
                fd = ((minmax_scale(zp) - minmax_scale(zm)) * g).sum() / (2 * h)
                assert dz[b, k] == pytest.approx(fd, abs=1e-6)

    def test_backward_flat_row_is_zero(self):
        z = np.ones((1, 4))
        assert not minmax_backward(z, minmax_scale(z), np.ones((1, 4))).any()


class TestRankingLoss:
    def test_hand_case(self):
        assert ranking_loss([0.0, 1.0, 0.5], [1.0, 0.5, 0.0]) == pytest.approx(100 / 9 * 1.5, abs=1e-9)

    def test_unit_scale_at_ten(self):
        s = np.linspace(1, 0, 10)
        p = s.copy()
        p[[3, 2]] = p[[2, 3]]
        # one swapped adjacent pair contributes its gap; scale 100/10**2 = 1
        assert ranking_loss(p, s) == pytest.approx(s[2] - s[3], abs=1e-12)

    def test_zero_when_order_respected(self):
        s = np.random.default_rng(0).random(8)
        assert ranking_loss(s, s) == 0.0
        assert ranking_loss(s**3, s) == 0.0

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.tuples(st.floats(0, 1), st.floats(0, 1)), min_size=1, max_size=12))
    def test_matches_enumeration(self, pairs):
        p, s = map(np.array, zip(*pairs))
        assert ranking_loss(p, s) == pytest.approx(pair_oracle(p, s), abs=1e-9)

    def test_shape_error(self):
        with pytest.raises(ValueError):
            ranking_loss([0.1, 0.2], [0.1])


class TestCrossEntropy:
    def test_uniform_pair(self):
        assert ce_loss([0.0, 0.0], [1, 0]) == pytest.approx(math.log(2))

    def test_single(self):
        assert ce_loss([3.0], [0]) == 0.0

    @pytest.mark.parametrize("K", [1, 2, 3, 4, 5])
    def test_normalised(self, K):
        z = np.random.default_rng(K).normal(size=K)
        total = sum(math.exp(-ce_loss(z, list(o))) for o in itertools.permutations(range(K)))
        assert total == pytest.approx(1.0, abs=1e-9)

    def test_matches_oracle(self):
        z = np.array([0.4, -1.2, 2.0, 0.1])
        assert ce_loss(z, [2, 0, 3, 1]) == pytest.approx(pl_oracle(z, [2, 0, 3, 1]), abs=1e-12)

    def test_errors(self):
        with pytest.raises(ValueError):
            ce_loss([0.0, 1.0], [0, 0])
        with pytest.raises(ValueError):
            ce_loss([np.nan, 1.0], [0, 1])


class TestTotalLoss:
    def test_lambda_zero_is_ce(self):
        z, s = np.array([0.3, 0.1, 0.9]), np.array([1.0, 3.0, 2.0])
        assert total_loss(z, [1, 2, 0], s, LossConfig(0.0)) == ce_loss(z, [1, 2, 0])

    def test_perfect_order(self):
        s = np.array([1.0, 3.0, 2.0])
        z = 2 * s
        assert total_loss(z, [1, 2, 0], s, LossConfig(1.0)) == pytest.approx(ce_loss(z, [1, 2, 0]), abs=1e-12)

    def test_composition(self):
        rng = np.random.default_rng(3)
        z, s = rng.normal(size=6), rng.normal(size=6)
        order = np.argsort(-s)
        want = pl_oracle(z, order) + 0.3 * pair_oracle(minmax_scale(z), minmax_scale(s))
        assert total_loss(z, order, s, LossConfig(0.3)) == pytest.approx(want, abs=1e-9)

    def test_lambda_domain(self):
        with pytest.raises(ValueError):
            LossConfig(1.5)


class TestSamples:
    def test_target_order(self):
        np.testing.assert_array_equal(target_order(np.array([7.0, 9.0, 5.0])), [1, 0, 2])
        np.testing.assert_array_equal(target_order(np.array([1.0, 1.0])), [0, 1])
        np.testing.assert_array_equal(target_order(np.array([7.0, 9.0, 5.0]), gold_pos=2), [2, 1, 0])

    def test_shuffled_fixture(self, tiny_kg):
        class Fixed:
            def permutation(self, n):
                return np.array([2, 0, 1])

        s = make_sample(tiny_kg, Query(0, 0), 1, [1, 2, 3], [9.0, 5.0, 7.0], 0, shuffle_rng=Fixed())
        np.testing.assert_array_equal(s.candidates, [3, 1, 2])
        assert s.candidates[s.target[0]] == 1
        assert s.to_json()["target"] == "B A C"

    def test_two_per_triple(self, tiny_kg):
        from kgrerank.kge import init_kge

        model = init_kge(5, 2, 4, seed=0)
        samples = build_training_samples(tiny_kg, model, K=3)
        assert len(samples) == 2 * len(tiny_kg.train)
        assert {s.query.direction for s in samples} == {"tail", "head"}

    def test_ten_triples_twenty_samples(self, synth_kg, synth_kge):
        from dataclasses import replace

        kg = replace(synth_kg, train=synth_kg.train[:10])
        samples = build_training_samples(kg, synth_kge, K=10, seed=0)
        assert len(samples) == 20
        for s in samples:
            assert s.K == 10
            assert (np.diff(s.kge_scores[s.target]) <= 0).all()

    def test_single_candidate(self, synth_kg, synth_kge):
        from dataclasses import replace

        kg = replace(synth_kg, train=synth_kg.train[:3])
        for s in build_training_samples(kg, synth_kge, K=1):
            assert s.to_json()["target"] == "A"

    def test_shuffle_independent_of_file_order(self, synth_kg, synth_kge):
        from dataclasses import replace

        kg = replace(synth_kg, train=synth_kg.train[:6])
        rev = replace(synth_kg, train=synth_kg.train[:6][::-1])
        a = {(s.query, s.gold): s.candidates.tolist() for s in build_training_samples(kg, synth_kge, 10, 4)}
        b = {(s.query, s.gold): s.candidates.tolist() for s in build_training_samples(rev, synth_kge, 10, 4)}
        assert a == b


@pytest.fixture(scope="module")
def small_samples(synth_kg, synth_kge):
    from dataclasses import replace

    kg = replace(synth_kg, train=synth_kg.train[:25])
    return build_training_samples(kg, synth_kge, K=5, seed=0)


class TestModel:
    def test_gradients_finite_difference(self, small_samples):
        samples = small_samples[:6]
        vocab = build_vocab([s.bundle.x_q for s in samples] + [t for s in samples for t in s.items])
        model = RerankerModel.init(vocab, d_r=5, hidden=4, seed=1)
        rng = np.random.default_rng(0)
        model.params["v"] = rng.normal(size=4)
        enc = encode_samples(vocab, samples)
        enc.evidence[:] = rng.random(enc.evidence.shape)
        targets, scores = sample_arrays(samples)
        cfg = LossConfig(0.5)
        _, _, _, grads = model.loss_and_grads(enc, targets, scores, cfg)
        h = 1e-6

        def f():
            return model.loss_and_grads(enc, targets, scores, cfg)[0]

        for name, arr in model.params.items():
            flat = arr.reshape(-1)
            for idx in rng.choice(flat.size, size=min(5, flat.size), replace=False):
                old = flat[idx]
                flat[idx] = old + h
                lp = f()
                flat[idx] = old - h
                lm = f()
                flat[idx] = old
                fd = (lp - lm) / (2 * h)
                assert grads[name].reshape(-1)[idx] == pytest.approx(fd, rel=1e-4, abs=1e-7), name

    def test_zero_epochs_is_init(self, small_samples):
        model = train_reranker(small_samples, LossConfig(), epochs=0, seed=2)
        ref = RerankerModel.init(model.vocab, seed=2)
        for k in model.params:
            np.testing.assert_array_equal(model.params[k], ref.params[k])

    @pytest.mark.parametrize("optimizer,lr", [("sgd", 0.05), ("adam", 0.01)])
    def test_training_reduces_loss(self, small_samples, optimizer, lr):
        samples = small_samples[:50]
        cfg = LossConfig(0.3)
        init = train_reranker(samples, cfg, epochs=0, seed=0, hidden=16)
        log = []
        model = train_reranker(samples, cfg, epochs=5, lr=lr, seed=0, hidden=16, log=log, optimizer=optimizer)
        assert mean_loss(model, samples, cfg) < mean_loss(init, samples, cfg)
        assert [e["epoch"] for e in log] == [1, 2, 3, 4, 5]

    def test_checkpoint_round_trip(self, small_samples, tmp_path):
        model = train_reranker(small_samples, LossConfig(), epochs=1, lr=0.01, seed=0, optimizer="adam")
        model.save(tmp_path / "rr.ckpt")
        back = RerankerModel.load(tmp_path / "rr.ckpt")
        assert back.vocab == model.vocab
        np.testing.assert_array_equal(back.rerank_logits(small_samples), model.rerank_logits(small_samples))

    def test_unknown_tokens_ignored(self, small_samples):
        model = RerankerModel.init(build_vocab(["a b"]), seed=0)
        z = model.rerank_logits(small_samples[:3])
        assert z.shape == (3, 5) and np.isfinite(z).all()

    def test_identity(self, small_samples):
        np.testing.assert_array_equal(IdentityReranker().rerank_logits(small_samples[:2])[0],
                                      small_samples[0].kge_scores)

    def test_errors(self, small_samples):
        with pytest.raises(ValueError):
            train_reranker([], LossConfig())
        with pytest.raises(ValueError):
            train_reranker(small_samples, LossConfig(), optimizer="lbfgs")
