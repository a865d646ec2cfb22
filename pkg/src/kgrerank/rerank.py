"""Second-stage re-ranker: samples, joint objective and the built-in scorer.

The scorer emits one logit per option identifier. Generation over the
identifiers is modelled as Plackett-Luce: at every slot a softmax over the
identifiers not yet emitted. The training objective is

    total = PL negative log-likelihood of the target order
            + lam * C / K**2 * sum_{s*_i < s*_j} max(0, p_i - p_j)

where ``p`` and ``s*`` are min-max scaled logits and first-stage scores.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import kernels
from .checkpoint import read_checkpoint, write_checkpoint
from .kge import KgeModel, Query, score_batch
from .kgstore import KnowledgeGraph
from .verbalizer import (
    PromptBundle,
    assemble_input,
    candidate_items,
    make_candidate_sequence,
    make_query_sequence,
    make_target,
    tokenize,
)

logger = logging.getLogger(__name__)

RANK_C = 100.0


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class LossConfig:
    lam: float = 0.1
    C: float = RANK_C

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lambda must lie in [0, 1], got {self.lam}")


# --------------------------------------------------------------------------
# losses


def minmax_scale(scores) -> np.ndarray:
    """Scale to [0, 1] along the last axis; constant rows map to 0.5."""
    s = np.asarray(scores, dtype=np.float64)
    if s.shape[-1] < 1:
        raise ValueError("need at least one score")
    lo = s.min(axis=-1, keepdims=True)
    span = s.max(axis=-1, keepdims=True) - lo
    flat = span == 0
    out = (s - lo) / np.where(flat, 1.0, span)
    return np.where(flat, 0.5, out)


def minmax_backward(z: np.ndarray, p: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Vector-Jacobian product of row-wise :func:`minmax_scale` at ``z``."""
    lo_i = np.argmin(z, axis=1)
    hi_i = np.argmax(z, axis=1)
    rows = np.arange(z.shape[0])
    span = z[rows, hi_i] - z[rows, lo_i]
    flat = span == 0
    safe = np.where(flat, 1.0, span)[:, None]
    dz = g / safe
    dz[rows, lo_i] -= (g * (1.0 - p)).sum(axis=1) / safe[:, 0]
    dz[rows, hi_i] -= (g * p).sum(axis=1) / safe[:, 0]
    dz[flat] = 0.0
    return dz


def ranking_loss(p, s_star, C: float = RANK_C) -> float:
    p = np.asarray(p, dtype=np.float64)
    s_star = np.asarray(s_star, dtype=np.float64)
    if p.shape != s_star.shape or p.ndim != 1:
        raise ValueError("p and s_star must be 1-D and the same length")
    K = len(p)
    loss, _ = kernels.hinge_rank_batch(p[None, :], s_star[None, :], C / K**2)
    return float(loss[0])


def _check_order(order, K):
    order = np.asarray(order, dtype=np.int64)
    if order.shape[-1] != K or not (np.sort(order, axis=-1) == np.arange(K)).all():
        raise ValueError("target must be a permutation of candidate positions 0..K-1")
    return order


def ce_loss(z, target) -> float:
    """Plackett-Luce NLL of ``target`` (0-based positions in emission order)."""
    z = np.asarray(z, dtype=np.float64)
    if not np.isfinite(z).all():
        raise ValueError("non-finite logits")
    order = _check_order(target, len(z))
    nll, _ = kernels.pl_nll_batch(z[None, :], order[None, :])
    return float(nll[0])


def batch_objective(z: np.ndarray, targets: np.ndarray, kge_scores: np.ndarray, cfg: LossConfig):
    """Per-row ``(total, ce, rank)`` losses and ``d total / d z``."""
    if not np.isfinite(z).all():
        raise TrainingDiverged("non-finite logits")
    K = z.shape[1]
    ce, dce = kernels.pl_nll_batch(z, targets)
    if cfg.lam == 0.0:
        return ce, ce, np.zeros_like(ce), dce
    p = minmax_scale(z)
    s = minmax_scale(kge_scores)
    rank, dp = kernels.hinge_rank_batch(p, s, cfg.C / K**2)
    dz = dce + cfg.lam * minmax_backward(z, p, dp)
    return ce + cfg.lam * rank, ce, rank, dz


def total_loss(z, target, kge_scores, cfg: LossConfig) -> float:
    z = np.asarray(z, dtype=np.float64)
    order = _check_order(target, len(z))
    tot, _, _, _ = batch_objective(z[None, :], order[None, :], np.asarray(kge_scores, dtype=np.float64)[None, :], cfg)
    return float(tot[0])


# --------------------------------------------------------------------------
# samples


@dataclass
class RerankSample:
    query: Query
    gold: int
    candidates: np.ndarray
    kge_scores: np.ndarray
    target: np.ndarray
    query_id: int
    bundle: PromptBundle
    items: list[str]
    evidence: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if self.evidence is None:
            self.evidence = np.zeros(len(self.candidates))

    @property
    def K(self) -> int:
        return len(self.candidates)

    def to_json(self) -> dict:
        return {
            "query_id": self.query_id,
            "direction": self.query.direction,
            "entity": self.query.entity,
            "rel": self.query.rel,
            "gold": self.gold,
            "candidates": self.candidates.tolist(),
            "kge_scores": self.kge_scores.tolist(),
            "target": make_target((self.target + 1).tolist()),
            "input": assemble_input(self.bundle),
        }


def _direction_code(direction: str) -> int:
    return 0 if direction == "tail" else 1


def target_order(kge_scores: np.ndarray, gold_pos: int | None = None) -> np.ndarray:
    """Positions sorted by descending first-stage score (ties to the lower position).

    With ``gold_pos`` the gold candidate is moved to the front.
    """
    order = np.argsort(-np.asarray(kge_scores), kind="stable")
    if gold_pos is not None:
        order = np.concatenate([[gold_pos], order[order != gold_pos]])
    return order.astype(np.int64)


def make_sample(kg, query, gold, cand, scores, query_id, *, qci=True, dp=False, shuffle_rng=None,
                gold_first=False) -> RerankSample:
    cand = np.asarray(cand, dtype=np.int64)
    scores = np.asarray(scores, dtype=np.float64)
    if shuffle_rng is not None:
        perm = shuffle_rng.permutation(len(cand))
        cand, scores = cand[perm], scores[perm]
    gold_pos = None
    if gold_first:
        hit = np.flatnonzero(cand == gold)
        gold_pos = int(hit[0]) if hit.size else None
    x_q = make_query_sequence(kg, query, definitions=dp)
    labels = [kg.entity_labels[e] for e in cand]
    bundle = PromptBundle(x_q=x_q, x_c=make_candidate_sequence(x_q, labels, qci))
    return RerankSample(
        query=query,
        gold=int(gold),
        candidates=cand,
        kge_scores=scores,
        target=target_order(scores, gold_pos),
        query_id=query_id,
        bundle=bundle,
        items=candidate_items(x_q, labels, qci),
    )


def build_training_samples(kg: KnowledgeGraph, kge_model: KgeModel, K: int, seed: int = 0, *,
                           qci: bool = True, dp: bool = False, gold_first: bool = False,
                           chunk: int = 512) -> list[RerankSample]:
    """Two samples per training triple: ``(h, r, ?)`` and ``(?, r, t)``.

    Candidates are the first-stage top-K for the query, shuffled with a
    generator keyed on ``(seed, query content)`` so the result does not
    depend on file order.
    """
    K = min(K, kg.entity_count)
    train = kg.train
    samples: list[RerankSample] = []
    if len(train) == 0:
        return samples
    tops = {}
    for direction, known_col in (("tail", 0), ("head", 2)):
        tk = np.empty((len(train), K), dtype=np.int64)
        ts = np.empty((len(train), K))
        for start in range(0, len(train), chunk):
            rows = train[start : start + chunk]
            s = score_batch(kge_model, rows[:, known_col], rows[:, 1], direction)
            order = np.argsort(-s, axis=1, kind="stable")[:, :K]
            tk[start : start + len(rows)] = order
            ts[start : start + len(rows)] = np.take_along_axis(s, order, axis=1)
        tops[direction] = (tk, ts)
    absent = 0
    for i, (h, r, t) in enumerate(train.tolist()):
        for direction in ("tail", "head"):
            known, gold = (h, t) if direction == "tail" else (t, h)
            query = Query(known, r, direction)
            cand, scores = tops[direction][0][i], tops[direction][1][i]
            rng = np.random.default_rng([seed, _direction_code(direction), known, r, gold])
            sample = make_sample(kg, query, gold, cand, scores, len(samples), qci=qci, dp=dp,
                                 shuffle_rng=rng, gold_first=gold_first)
            absent += int(gold not in cand)
            samples.append(sample)
    logger.info("built %d samples; gold outside top-%d in %.1f%%", len(samples), K,
                100.0 * absent / max(len(samples), 1))
    return samples


# --------------------------------------------------------------------------
# model


@dataclass
class Encoded:
    q_tok: np.ndarray
    q_mask: np.ndarray
    c_tok: np.ndarray
    c_mask: np.ndarray
    evidence: np.ndarray

    def take(self, idx) -> "Encoded":
        return Encoded(self.q_tok[idx], self.q_mask[idx], self.c_tok[idx], self.c_mask[idx], self.evidence[idx])

    def __len__(self) -> int:
        return len(self.q_tok)


def build_vocab(texts: Sequence[str]) -> dict[str, int]:
    vocab: dict[str, int] = {"<unk>": 0}
    for text in texts:
        for tok in tokenize(text):
            vocab.setdefault(tok, len(vocab))
    return vocab


def _encode_texts(vocab, texts, shape_prefix):
    ids = [[vocab.get(t, 0) for t in tokenize(x)] for x in texts]
    L = max((len(x) for x in ids), default=0) or 1
    tok = np.zeros((len(ids), L), dtype=np.int64)
    mask = np.zeros((len(ids), L))
    for i, row in enumerate(ids):
        tok[i, : len(row)] = row
        mask[i, : len(row)] = [1.0 if j else 0.0 for j in row]
    return tok.reshape(*shape_prefix, L), mask.reshape(*shape_prefix, L)


def encode(vocab: dict[str, int], queries: Sequence[str], items: Sequence[Sequence[str]],
           evidence: np.ndarray | None = None) -> Encoded:
    B = len(queries)
    K = len(items[0]) if B else 0
    if any(len(x) != K for x in items):
        raise ValueError("all samples in a batch need the same number of candidates")
    q_tok, q_mask = _encode_texts(vocab, queries, (B,))
    c_tok, c_mask = _encode_texts(vocab, [t for row in items for t in row], (B, K))
    ev = np.zeros((B, K)) if evidence is None else np.asarray(evidence, dtype=np.float64)
    return Encoded(q_tok, q_mask, c_tok, c_mask, ev)


def encode_samples(vocab, samples: Sequence[RerankSample]) -> Encoded:
    ev = np.array([s.evidence for s in samples]) if samples else None
    return encode(vocab, [s.bundle.x_q for s in samples], [s.items for s in samples], ev)


PARAM_NAMES = ("emb", "Wq", "bq", "Wc", "bc", "A", "v", "w_e")


class RerankerModel:
    """Mean-pooled query/candidate encoders with a bilinear head.

    ``z_i = enc_q . A . enc_c(i) + v . enc_c(i) + w_e * evidence_i``
    """

    def __init__(self, vocab: dict[str, int], params: dict[str, np.ndarray]):
        self.vocab = vocab
        self.params = params

    @classmethod
    def init(cls, vocab: dict[str, int], d_r: int = 32, hidden: int | None = None, seed: int = 0,
             evidence_weight: float = 1.0) -> "RerankerModel":
        h = hidden or d_r
        rng = np.random.default_rng(seed)
        params = {
            "emb": rng.normal(0.0, 1.0, (len(vocab), d_r)),
            "Wq": rng.normal(0.0, 1.0 / np.sqrt(d_r), (d_r, h)),
            "bq": np.zeros(h),
            "Wc": rng.normal(0.0, 1.0 / np.sqrt(d_r), (d_r, h)),
            "bc": np.zeros(h),
            "A": rng.normal(0.0, 1.0 / h, (h, h)),
            "v": np.zeros(h),
            "w_e": np.array([evidence_weight]),
        }
        params["emb"][0] = 0.0
        return cls(vocab, params)

    def copy(self) -> "RerankerModel":
        return RerankerModel(dict(self.vocab), {k: v.copy() for k, v in self.params.items()})

    # forward / backward ---------------------------------------------------

    def _forward(self, enc: Encoded):
        P = self.params
        emb = P["emb"]
        cq = np.maximum(enc.q_mask.sum(-1), 1.0)
        mq = (emb[enc.q_tok] * enc.q_mask[..., None]).sum(-2) / cq[..., None]
        hq = np.tanh(mq @ P["Wq"] + P["bq"])
        cc = np.maximum(enc.c_mask.sum(-1), 1.0)
        mc = (emb[enc.c_tok] * enc.c_mask[..., None]).sum(-2) / cc[..., None]
        hc = np.tanh(mc @ P["Wc"] + P["bc"])
        qa = hq @ P["A"]
        z = np.einsum("bg,bkg->bk", qa, hc) + hc @ P["v"] + P["w_e"][0] * enc.evidence
        return z, (cq, mq, hq, cc, mc, hc, qa)

    def logits(self, enc: Encoded) -> np.ndarray:
        return self._forward(enc)[0]

    def rerank_logits(self, samples: Sequence[RerankSample]) -> np.ndarray:
        return self.logits(encode_samples(self.vocab, samples))

    def backward(self, enc: Encoded, cache, dz: np.ndarray) -> dict[str, np.ndarray]:
        P = self.params
        cq, mq, hq, cc, mc, hc, qa = cache
        g = {}
        g["A"] = np.einsum("bh,bkg,bk->hg", hq, hc, dz, optimize=True)
        g["v"] = np.einsum("bk,bkg->g", dz, hc)
        g["w_e"] = np.array([np.sum(dz * enc.evidence)])
        dhc = dz[..., None] * (qa[:, None, :] + P["v"])
        dhq = np.einsum("bk,bkg,hg->bh", dz, hc, P["A"], optimize=True)
        dpc = dhc * (1.0 - hc * hc)
        g["Wc"] = np.einsum("bkd,bkh->dh", mc, dpc, optimize=True)
        g["bc"] = dpc.sum(axis=(0, 1))
        dmc = dpc @ P["Wc"].T
        dpq = dhq * (1.0 - hq * hq)
        g["Wq"] = mq.T @ dpq
        g["bq"] = dpq.sum(axis=0)
        dmq = dpq @ P["Wq"].T
        demb = np.zeros_like(P["emb"])
        wq = (dmq / cq[:, None])[:, None, :] * enc.q_mask[..., None]
        np.add.at(demb, enc.q_tok.ravel(), wq.reshape(-1, wq.shape[-1]))
        wc = (dmc / cc[..., None])[..., None, :] * enc.c_mask[..., None]
        np.add.at(demb, enc.c_tok.ravel(), wc.reshape(-1, wc.shape[-1]))
        g["emb"] = demb
        return g

    def loss_and_grads(self, enc: Encoded, targets: np.ndarray, kge_scores: np.ndarray, cfg: LossConfig):
        """Mean total loss over the batch, its parts, and parameter gradients."""
        z, cache = self._forward(enc)
        tot, ce, rank, dz = batch_objective(z, targets, kge_scores, cfg)
        B = len(z)
        grads = self.backward(enc, cache, dz / B)
        return float(tot.mean()), float(ce.mean()), float(rank.mean()), grads

    # persistence ----------------------------------------------------------

    def save(self, path) -> None:
        inv = sorted(self.vocab.items(), key=lambda kv: kv[1])
        meta = {
            "vocab": [k for k, _ in inv],
            "d_r": int(self.params["emb"].shape[1]),
            "hidden": int(self.params["A"].shape[0]),
        }
        write_checkpoint(path, "reranker", meta, {k: self.params[k] for k in PARAM_NAMES})

    @classmethod
    def load(cls, path) -> "RerankerModel":
        meta, blocks = read_checkpoint(path, "reranker")
        vocab = {tok: i for i, tok in enumerate(meta["vocab"])}
        return cls(vocab, {k: blocks[k] for k in PARAM_NAMES})


def sample_arrays(samples: Sequence[RerankSample]):
    targets = np.array([s.target for s in samples], dtype=np.int64)
    scores = np.array([s.kge_scores for s in samples], dtype=np.float64)
    return targets, scores


def mean_loss(model: RerankerModel, samples: Sequence[RerankSample], cfg: LossConfig) -> float:
    enc = encode_samples(model.vocab, samples)
    targets, scores = sample_arrays(samples)
    tot, _, _, _ = batch_objective(model.logits(enc), targets, scores, cfg)
    return float(tot.mean())


def train_reranker(
    samples: Sequence[RerankSample],
    cfg: LossConfig,
    epochs: int = 3,
    batch: int = 16,
    lr: float = 1e-4,
    seed: int = 0,
    d_r: int = 32,
    hidden: int | None = None,
    log: list | None = None,
    optimizer: str = "sgd",
) -> RerankerModel:
    """Mini-batch training on the joint objective.

    ``optimizer="sgd"`` is plain gradient descent with a fixed step size;
    ``"adam"`` uses bias-corrected Adam with the same step size.
    """
    if optimizer not in ("sgd", "adam"):
        raise ValueError(f"unknown optimizer {optimizer!r}")
    if not samples:
        raise ValueError("no training samples")
    vocab = build_vocab([s.bundle.x_q for s in samples] + [t for s in samples for t in s.items])
    model = RerankerModel.init(vocab, d_r=d_r, hidden=hidden, seed=seed)
    if epochs <= 0:
        return model
    enc = encode_samples(vocab, samples)
    targets, scores = sample_arrays(samples)
    rng = np.random.default_rng([seed, 1])
    n = len(samples)
    mom = {k: np.zeros_like(v) for k, v in model.params.items()}
    vel = {k: np.zeros_like(v) for k, v in model.params.items()}
    step = 0
    for epoch in range(epochs):
        perm = rng.permutation(n)
        sums = np.zeros(3)
        for start in range(0, n, batch):
            idx = perm[start : start + batch]
            tot, ce, rank, grads = model.loss_and_grads(enc.take(idx), targets[idx], scores[idx], cfg)
            if not np.isfinite(tot):
                raise TrainingDiverged(f"non-finite re-ranker loss in epoch {epoch + 1}")
            step += 1
            for k, gk in grads.items():
                if optimizer == "sgd":
                    model.params[k] -= lr * gk
                    continue
                mom[k] = 0.9 * mom[k] + 0.1 * gk
                vel[k] = 0.999 * vel[k] + 0.001 * gk * gk
                mhat = mom[k] / (1 - 0.9**step)
                vhat = vel[k] / (1 - 0.999**step)
                model.params[k] -= lr * mhat / (np.sqrt(vhat) + 1e-8)
            sums += np.array([tot, ce, rank]) * len(idx)
        tot, ce, rank = sums / n
        entry = {"epoch": epoch + 1, "ce": float(ce), "rank_loss": float(rank), "total": float(tot)}
        logger.info("rerank epoch %d total %.5f ce %.5f rank %.5f", epoch + 1, tot, ce, rank)
        if log is not None:
            log.append(entry)
    return model


class IdentityReranker:
    """Logits equal to the first-stage scores; reproduces the first-stage order."""

    def rerank_logits(self, samples: Sequence[RerankSample]) -> np.ndarray:
        return np.array([s.kge_scores for s in samples], dtype=np.float64)
