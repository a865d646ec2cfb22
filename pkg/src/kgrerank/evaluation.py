"""Filtered link-prediction metrics, re-rank merging and the ablation harness."""
from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Iterable, Protocol, Sequence

import numpy as np

from . import kernels
from .config import Toggles
from .decoding import complete_ranking, decode_static, parse_ranking, render
from .kge import KgeModel, Query, score_batch
from .kgstore import FilterIndex, KnowledgeGraph, build_filter_index
from .rerank import RerankSample, make_sample
from .retriever import DEFAULT_K_C, DEFAULT_K_Q, DEFAULT_THETA, TrainingTextIndex, retrieve_vec
from .verbalizer import fill_blank, make_query_sequence

THREADS_ENV = "KGRERANK_THREADS"


class Reranker(Protocol):
    def rerank_logits(self, samples: Sequence[RerankSample]) -> np.ndarray: ...


@dataclass
class RankingMetrics:
    mr: float
    mrr: float
    hits1: float
    hits3: float
    hits10: float
    n_queries: int

    @classmethod
    def from_ranks(cls, ranks: Iterable[int]) -> "RankingMetrics":
        r = np.asarray(list(ranks), dtype=np.float64)
        if r.size == 0:
            return cls(0.0, 0.0, 0.0, 0.0, 0.0, 0)
        return cls(
            mr=float(r.mean()),
            mrr=float((1.0 / r).mean()),
            hits1=float((r <= 1).mean()),
            hits3=float((r <= 3).mean()),
            hits10=float((r <= 10).mean()),
            n_queries=int(r.size),
        )

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def table(self, title: str = "") -> str:
        head = f"{'':<24}{'MRR':>8}{'MR':>10}{'Hits@1':>8}{'Hits@3':>8}{'Hits@10':>8}{'n':>8}"
        row = (f"{title:<24}{self.mrr:>8.4f}{self.mr:>10.2f}{self.hits1:>8.4f}"
               f"{self.hits3:>8.4f}{self.hits10:>8.4f}{self.n_queries:>8d}")
        return head + "\n" + row


def format_table(rows: Sequence[tuple[str, RankingMetrics]]) -> str:
    lines = []
    for i, (name, m) in enumerate(rows):
        t = m.table(name).splitlines()
        lines.extend(t if i == 0 else t[1:])
    return "\n".join(lines)


# --------------------------------------------------------------------------
# rank primitives


def rerank_merge(first_stage: Sequence[int], candidates: Sequence[int], permutation: Sequence[int]) -> np.ndarray:
    """Replace the first K entries of ``first_stage`` with the re-ranked candidates.

    ``permutation`` is 0-based positions into ``candidates`` in new order.
    """
    first_stage = np.asarray(first_stage, dtype=np.int64)
    cand = np.asarray(candidates, dtype=np.int64)
    K = len(cand)
    if sorted(permutation) != list(range(K)):
        raise ValueError("permutation must cover every candidate exactly once")
    if not np.array_equal(np.sort(first_stage[:K]), np.sort(cand)):
        raise ValueError("candidates must be the first K entries of the first-stage ordering")
    out = first_stage.copy()
    out[:K] = cand[np.asarray(permutation, dtype=np.int64)]
    return out


def filtered_rank(ordering: Sequence[int], gold: int, filter_set: Iterable[int]) -> int:
    ordering = np.asarray(ordering, dtype=np.int64)
    n = int(ordering.max()) + 1 if ordering.size else 0
    mask = np.zeros((1, max(n, gold + 1)), dtype=np.uint8)
    others = [e for e in filter_set if e != gold and e < mask.shape[1]]
    mask[0, others] = 1
    return int(kernels.filtered_ranks(ordering[None, :], np.array([gold]), mask)[0])


def cluster_rank(ordering: Sequence[int], gold_cluster: int, clusters: Sequence[int],
                 filter_set: Iterable[int]) -> int:
    """Best filtered rank among entities sharing the gold cluster."""
    if clusters is None:
        raise ValueError("cluster data is required for cluster-level ranks")
    clusters = np.asarray(clusters)
    members = np.flatnonzero(clusters == gold_cluster)
    if members.size == 0:
        raise ValueError(f"cluster {gold_cluster} has no members")
    fs = set(filter_set)
    return min(filtered_rank(ordering, int(m), fs - {int(m)}) for m in members)


# --------------------------------------------------------------------------
# evaluation driver


@dataclass
class RetrievalSettings:
    index: TrainingTextIndex | None = None
    K_q: int = DEFAULT_K_Q
    K_c: int = DEFAULT_K_C
    theta: float = DEFAULT_THETA


@dataclass
class EvalResult:
    metrics: RankingMetrics
    ranks: np.ndarray
    outcomes: dict[str, int] = field(default_factory=dict)


def evidence_features(kg: KnowledgeGraph, queries: Sequence[Query], cand: np.ndarray, toggles: Toggles,
                      retrieval: RetrievalSettings) -> np.ndarray:
    """Max retrieval similarity per candidate from the enabled prompt sources."""
    N, K = cand.shape
    ev = np.zeros((N, K))
    index = retrieval.index
    if index is None or len(index) == 0 or not (toggles.qp or toggles.cp):
        return ev
    emb = index.embedder
    for n, q in enumerate(queries):
        x_q = make_query_sequence(kg, q)
        cvec = emb.embed_many([fill_blank(x_q, kg.entity_labels[e]) for e in cand[n]])
        feats = []
        if toggles.qp:
            rows, _ = retrieve_vec(index, emb.embed(x_q), retrieval.K_q)
            feats.append((cvec @ index.embeddings[rows].T).max(axis=1) if rows.size else np.zeros(K))
        if toggles.cp:
            best = (cvec @ index.embeddings.T).max(axis=1)
            feats.append(np.where(best >= retrieval.theta, best, 0.0))
        ev[n] = np.max(feats, axis=0)
    return ev


def _decode_rows(logits: np.ndarray, constrained: bool, outcomes: dict[str, int]) -> list[list[int]]:
    perms = []
    for z in logits:
        K = len(z)
        if constrained:
            perm = decode_static(z)
            outcomes["ok"] = outcomes.get("ok", 0) + 1
        else:
            # free greedy decoding of static logits repeats the top identifier
            emitted = [int(np.argmax(z))] * K
            diag = parse_ranking(render(emitted, K), K)
            outcomes[diag.outcome] = outcomes.get(diag.outcome, 0) + 1
            perm = complete_ranking(diag.emitted, K)
        perms.append(perm)
    return perms


def _filter_mask(queries, golds, findex: FilterIndex, n_ent: int) -> np.ndarray:
    mask = np.zeros((len(queries), n_ent), dtype=np.uint8)
    for i, (q, g) in enumerate(zip(queries, golds)):
        known = findex.known(q.entity, q.rel, q.direction)
        if known:
            mask[i, list(known)] = 1
        mask[i, g] = 0
    return mask


def _eval_chunk(kg, kge_model, reranker, toggles, K, findex, retrieval, use_clusters, direction, rows, outcomes):
    known_col, gold_col = (0, 2) if direction == "tail" else (2, 0)
    scores = score_batch(kge_model, rows[:, known_col], rows[:, 1], direction)
    orderings = np.argsort(-scores, axis=1, kind="stable")
    golds = rows[:, gold_col]
    queries = [Query(int(e), int(r), direction) for e, r in zip(rows[:, known_col], rows[:, 1])]
    Kc = min(K, kg.entity_count)
    if reranker is not None:
        cand = orderings[:, :Kc]
        cscores = np.take_along_axis(scores, cand, axis=1)
        samples = [
            make_sample(kg, q, g, c, s, i, qci=toggles.qci, dp=toggles.dp)
            for i, (q, g, c, s) in enumerate(zip(queries, golds, cand, cscores))
        ]
        ev = evidence_features(kg, queries, cand, toggles, retrieval)
        for s, e in zip(samples, ev):
            s.evidence = e
        logits = np.asarray(reranker.rerank_logits(samples), dtype=np.float64)
        for i, perm in enumerate(_decode_rows(logits, toggles.cg, outcomes)):
            orderings[i] = rerank_merge(orderings[i], cand[i], perm)
    mask = _filter_mask(queries, golds, findex, kg.entity_count)
    if use_clusters:
        return np.array([
            cluster_rank(orderings[i], int(kg.cluster_of[golds[i]]), kg.cluster_of, np.flatnonzero(mask[i]))
            for i in range(len(rows))
        ], dtype=np.int64)
    return kernels.filtered_ranks(orderings, golds, mask)


def evaluate(kg: KnowledgeGraph, kge_model: KgeModel, reranker: Reranker | None = None,
             toggles: Toggles = Toggles(), K: int = 10, split: str = "test",
             retrieval: RetrievalSettings | None = None, findex: FilterIndex | None = None,
             use_clusters: bool | None = None, chunk: int = 256, threads: int | None = None) -> EvalResult:
    """Filtered metrics over both query directions of every triple in ``split``.

    Ranks are ordered tail queries first, then head queries, each in file
    order. With ``reranker=None`` the first-stage ordering is scored.
    """
    findex = findex or build_filter_index(kg)
    retrieval = retrieval or RetrievalSettings()
    if use_clusters is None:
        use_clusters = kg.kind == "open" and kg.cluster_of is not None
    elif use_clusters and kg.cluster_of is None:
        raise ValueError("cluster evaluation requested but no clusters are loaded")
    triples = kg.split(split)
    threads = threads or int(os.environ.get(THREADS_ENV, "1") or 1)
    jobs = [(d, triples[s : s + chunk]) for d in ("tail", "head") for s in range(0, len(triples), chunk)]
    outcome_parts = [dict() for _ in jobs]

    def run(j):
        d, rows = jobs[j]
        return _eval_chunk(kg, kge_model, reranker, toggles, K, findex, retrieval, use_clusters, d, rows,
                           outcome_parts[j])

    if threads > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(run, range(len(jobs))))
    else:
        parts = [run(j) for j in range(len(jobs))]
    ranks = np.concatenate(parts) if parts else np.zeros(0, dtype=np.int64)
    outcomes: dict[str, int] = {}
    for part in outcome_parts:
        for k, v in part.items():
            outcomes[k] = outcomes.get(k, 0) + v
    return EvalResult(RankingMetrics.from_ranks(ranks), ranks, outcomes)
