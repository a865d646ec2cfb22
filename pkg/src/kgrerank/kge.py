"""First-stage bilinear KGE with a shared core tensor (TuckER-style).

A triple ``(h, r, t)`` scores ``sum_ijk W[i, j, k] * E[h, i] * R[r, j] * E[t, k]``.
Head queries use the same form with the roles of head and tail swapped.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .checkpoint import read_checkpoint, write_checkpoint
from .kgstore import KnowledgeGraph

logger = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


class Query(NamedTuple):
    """``(entity, rel, direction)``; ``entity`` is the known end of the triple."""

    entity: int
    rel: int
    direction: str = "tail"


@dataclass
class KgeModel:
    entity_emb: np.ndarray
    relation_emb: np.ndarray
    core: np.ndarray

    @property
    def d(self) -> int:
        return self.entity_emb.shape[1]

    @property
    def entity_count(self) -> int:
        return self.entity_emb.shape[0]

    @property
    def relation_count(self) -> int:
        return self.relation_emb.shape[0]

    def params(self) -> dict[str, np.ndarray]:
        return {"entity_emb": self.entity_emb, "relation_emb": self.relation_emb, "core": self.core}

    def copy(self) -> "KgeModel":
        return KgeModel(self.entity_emb.copy(), self.relation_emb.copy(), self.core.copy())

    def save(self, path) -> None:
        meta = {"d": self.d, "entity_count": self.entity_count, "relation_count": self.relation_count}
        write_checkpoint(path, "kge", meta, self.params())

    @classmethod
    def load(cls, path) -> "KgeModel":
        _, b = read_checkpoint(path, "kge")
        return cls(b["entity_emb"], b["relation_emb"], b["core"])


@dataclass
class CandidateList:
    query: Query
    entities: np.ndarray
    scores: np.ndarray

    def __len__(self) -> int:
        return len(self.entities)


def init_kge(n_entities: int, n_relations: int, d: int, seed: int) -> KgeModel:
    if d <= 0:
        raise ValueError(f"embedding width must be positive, got {d}")
    rng = np.random.default_rng(seed)
    return KgeModel(
        entity_emb=rng.uniform(-0.1, 0.1, (n_entities, d)),
        relation_emb=rng.uniform(-0.1, 0.1, (n_relations, d)),
        core=rng.uniform(-0.1, 0.1, (d, d, d)),
    )


def _outer(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return (a[:, :, None] * b[:, None, :]).reshape(len(a), -1)


def _tail_context(model: KgeModel, heads, rels) -> np.ndarray:
    # x[b, k] = sum_ij E[h, i] R[r, j] W[i, j, k]
    d = model.d
    return _outer(model.entity_emb[heads], model.relation_emb[rels]) @ model.core.reshape(d * d, d)


def _head_context(model: KgeModel, tails, rels) -> np.ndarray:
    # y[b, i] = sum_jk W[i, j, k] R[r, j] E[t, k]
    d = model.d
    return _outer(model.relation_emb[rels], model.entity_emb[tails]) @ model.core.reshape(d, d * d).T


def score_batch(model: KgeModel, entities, rels, direction: str) -> np.ndarray:
    """Scores of every entity for a batch of queries sharing ``direction``."""
    entities = np.asarray(entities, dtype=np.int64)
    rels = np.asarray(rels, dtype=np.int64)
    if entities.size and (entities.min() < 0 or entities.max() >= model.entity_count):
        raise IndexError("entity index out of range")
    if rels.size and (rels.min() < 0 or rels.max() >= model.relation_count):
        raise IndexError("relation index out of range")
    if direction == "tail":
        ctx = _tail_context(model, entities, rels)
    elif direction == "head":
        ctx = _head_context(model, entities, rels)
    else:
        raise ValueError(f"direction must be 'tail' or 'head', got {direction!r}")
    return ctx @ model.entity_emb.T


def score_all(model: KgeModel, query: Query) -> np.ndarray:
    return score_batch(model, [query.entity], [query.rel], query.direction)[0]


def rank_order(scores: np.ndarray) -> np.ndarray:
    """Entity indices by descending score, ties by ascending index."""
    return np.argsort(-np.asarray(scores), kind="stable")


def topk_from_scores(query: Query, scores: np.ndarray, K: int, clamp: bool = True) -> CandidateList:
    n = len(scores)
    if K < 1:
        raise ValueError("K must be at least 1")
    if K > n:
        if not clamp:
            raise ValueError(f"K={K} exceeds entity count {n}")
        K = n
    order = rank_order(scores)[:K]
    return CandidateList(query, order, np.asarray(scores)[order])


def topk_candidates(model: KgeModel, query: Query, K: int, clamp: bool = True) -> CandidateList:
    return topk_from_scores(query, score_all(model, query), K, clamp)


# --------------------------------------------------------------------------
# training


def _query_labels(kg: KnowledgeGraph):
    """Unique training queries in both directions with their true answers."""
    tails: dict[tuple[int, int], list[int]] = {}
    heads: dict[tuple[int, int], list[int]] = {}
    for h, r, t in kg.train.tolist():
        tails.setdefault((h, r), []).append(t)
        heads.setdefault((t, r), []).append(h)
    out = []
    for direction, table in (("tail", tails), ("head", heads)):
        for (e, r), answers in table.items():
            out.append((direction, e, r, sorted(set(answers))))
    return out


def kge_loss_and_grads(model: KgeModel, direction: str, entities, rels, targets: np.ndarray):
    """Mean binary cross-entropy over all entities for a batch of queries.

    ``targets`` is a 0/1 matrix ``(B, entity_count)``. Returns the loss and a
    dict of gradients shaped like ``model.params()``.
    """
    entities = np.asarray(entities, dtype=np.int64)
    rels = np.asarray(rels, dtype=np.int64)
    E, R, W = model.entity_emb, model.relation_emb, model.core
    d = model.d
    known = E[entities]
    rel = R[rels]
    W_i = W.reshape(d, d * d)
    W_j = W.transpose(1, 0, 2).reshape(d, d * d)
    W_k = W.reshape(d * d, d)
    if direction == "tail":
        ctx = _outer(known, rel) @ W_k
    else:
        ctx = _outer(rel, known) @ W_i.T
    s = ctx @ E.T
    n = s.size
    # log(1 + exp(-|s|)) form keeps large scores finite
    loss = float(np.sum(np.maximum(s, 0) - s * targets + np.log1p(np.exp(-np.abs(s)))) / n)
    g = (0.5 * (1.0 + np.tanh(0.5 * s)) - targets) / n

    dE = g.T @ ctx
    dctx = g @ E
    if direction == "tail":
        dW = (_outer(known, rel).T @ dctx).reshape(d, d, d)
        dknown = _outer(rel, dctx) @ W_i.T
        drel = _outer(known, dctx) @ W_j.T
    else:
        dW = (dctx.T @ _outer(rel, known)).reshape(d, d, d)
        dknown = _outer(dctx, rel) @ W_k
        drel = _outer(dctx, known) @ W_j.T
    np.add.at(dE, entities, dknown)
    dR = np.zeros_like(R)
    np.add.at(dR, rels, drel)
    return loss, {"entity_emb": dE, "relation_emb": dR, "core": dW}


def train_kge(
    kg: KnowledgeGraph,
    d: int = 32,
    epochs: int = 50,
    lr: float = 0.01,
    seed: int = 0,
    batch_size: int = 128,
    log_every: int = 0,
    history: list | None = None,
) -> KgeModel:
    """Train with 1-N binary cross-entropy and Adam, both query directions.

    Deterministic for a fixed seed. ``epochs=0`` returns the initialization.
    Mean epoch losses are appended to ``history`` when given.
    """
    if len(kg.train) == 0:
        raise ValueError("training split is empty")
    model = init_kge(kg.entity_count, kg.relation_count, d, seed)
    if epochs <= 0:
        return model
    rng = np.random.default_rng(seed + 1)
    queries = _query_labels(kg)
    params = model.params()
    m = {k: np.zeros_like(v) for k, v in params.items()}
    v = {k: np.zeros_like(v) for k, v in params.items()}
    b1, b2, eps = 0.9, 0.999, 1e-8
    step = 0
    for epoch in range(epochs):
        perm = rng.permutation(len(queries))
        total, nb = 0.0, 0
        for start in range(0, len(perm), batch_size):
            chunk = [queries[i] for i in perm[start : start + batch_size]]
            for direction in ("tail", "head"):
                sub = [q for q in chunk if q[0] == direction]
                if not sub:
                    continue
                ents = [q[1] for q in sub]
                rels = [q[2] for q in sub]
                targets = np.zeros((len(sub), kg.entity_count))
                for row, q in enumerate(sub):
                    targets[row, q[3]] = 1.0
                loss, grads = kge_loss_and_grads(model, direction, ents, rels, targets)
                if not np.isfinite(loss):
                    raise TrainingDiverged(f"non-finite KGE loss at epoch {epoch}, step {step}")
                step += 1
                for k, p in params.items():
                    gk = grads[k]
                    m[k] = b1 * m[k] + (1 - b1) * gk
                    v[k] = b2 * v[k] + (1 - b2) * gk * gk
                    mhat = m[k] / (1 - b1**step)
                    vhat = v[k] / (1 - b2**step)
                    p -= lr * mhat / (np.sqrt(vhat) + eps)
                total += loss
                nb += 1
        if history is not None:
            history.append(total / max(nb, 1))
        if log_every and (epoch + 1) % log_every == 0:
            logger.info("kge epoch %d loss %.6f", epoch + 1, total / max(nb, 1))
    return model
