"""Nearest-neighbour retrieval of training-triple sentences for prompts."""
from __future__ import annotations

import shlex
import subprocess
import zlib
from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np

from .kgstore import KnowledgeGraph
from .verbalizer import make_triple_sequence, option_alphabet, tokenize

DEFAULT_K_Q = 3
DEFAULT_K_C = 3
DEFAULT_THETA = 0.8


class TextEmbedder(Protocol):
    width: int

    def embed(self, text: str) -> np.ndarray: ...

    def embed_many(self, texts: Sequence[str]) -> np.ndarray: ...


def _unit_rows(m: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(m, axis=1, keepdims=True)
    return np.divide(m, norms, out=np.zeros_like(m), where=norms > 0)


class HashingEmbedder:
    """Hashed unigram + bigram counts, L2-normalised.

    Stable across processes (CRC32 buckets). Empty text embeds to zeros.
    """

    def __init__(self, width: int = 512):
        self.width = width

    def _features(self, text: str) -> np.ndarray:
        toks = tokenize(text)
        vec = np.zeros(self.width)
        grams = [f"u:{t}" for t in toks] + [f"b:{a} {b}" for a, b in zip(toks, toks[1:])]
        for g in grams:
            vec[zlib.crc32(g.encode("utf-8")) % self.width] += 1.0
        return vec

    def embed(self, text: str) -> np.ndarray:
        return self.embed_many([text])[0]

    def embed_many(self, texts: Sequence[str]) -> np.ndarray:
        m = np.zeros((len(texts), self.width))
        for i, t in enumerate(texts):
            m[i] = self._features(t)
        return _unit_rows(m)


class ProcessEmbedder:
    """Adapter for an external encoder process.

    The process reads one text per line on stdin and answers each with one
    line of whitespace-separated floats.
    """

    def __init__(self, command: str | Sequence[str], width: int | None = None):
        args = shlex.split(command) if isinstance(command, str) else list(command)
        self._proc = subprocess.Popen(
            args, stdin=subprocess.PIPE, stdout=subprocess.PIPE, text=True, bufsize=1, encoding="utf-8"
        )
        self.width = width

    def embed(self, text: str) -> np.ndarray:
        assert self._proc.stdin is not None and self._proc.stdout is not None
        self._proc.stdin.write(" ".join(text.splitlines()) + "\n")
        self._proc.stdin.flush()
        line = self._proc.stdout.readline()
        if not line:
            raise RuntimeError("embedder process closed its output")
        vec = np.array([float(x) for x in line.split()])
        if self.width is None:
            self.width = len(vec)
        elif len(vec) != self.width:
            raise RuntimeError(f"embedder returned width {len(vec)}, expected {self.width}")
        return _unit_rows(vec[None, :])[0]

    def embed_many(self, texts: Sequence[str]) -> np.ndarray:
        return np.array([self.embed(t) for t in texts]).reshape(len(texts), -1)

    def close(self) -> None:
        if self._proc.stdin:
            self._proc.stdin.close()
        self._proc.wait(timeout=10)


@dataclass
class TrainingTextIndex:
    sequences: list[str]
    embeddings: np.ndarray
    embedder: TextEmbedder

    def __len__(self) -> int:
        return len(self.sequences)


def build_index(kg: KnowledgeGraph, embedder: TextEmbedder | None = None) -> TrainingTextIndex:
    embedder = embedder or HashingEmbedder()
    seqs = [make_triple_sequence(kg, h, r, t) for h, r, t in kg.train.tolist()]
    emb = embedder.embed_many(seqs) if seqs else np.zeros((0, embedder.width or 0))
    return TrainingTextIndex(seqs, emb, embedder)


def _check_theta(theta):
    if theta is not None and not 0.0 <= theta <= 1.0:
        raise ValueError(f"theta must lie in [0, 1], got {theta}")


def retrieve_vec(index: TrainingTextIndex, qvec: np.ndarray, k: int, theta: float | None = None):
    """Row ids and cosine similarities of the top ``k`` rows (ties by row id)."""
    if k < 1:
        raise ValueError("k must be at least 1")
    _check_theta(theta)
    if len(index) == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0)
    sims = index.embeddings @ qvec
    top = np.argsort(-sims, kind="stable")[:k]
    keep = top if theta is None else top[sims[top] >= theta]
    return keep, sims[keep]


def retrieve(index: TrainingTextIndex, query_text: str, k: int, theta: float | None = None):
    _check_theta(theta)
    rows, sims = retrieve_vec(index, index.embedder.embed(query_text), k, theta)
    return [(index.sequences[i], float(s)) for i, s in zip(rows, sims)]


def query_related_prompt(index: TrainingTextIndex, x_q: str, K_q: int = DEFAULT_K_Q) -> str:
    if len(index) == 0:
        return ""
    return ". ".join(seq for seq, _ in retrieve(index, x_q, K_q))


def candidate_support(index: TrainingTextIndex, candidate_texts: Sequence[str], K_c: int = DEFAULT_K_C,
                      theta: float = DEFAULT_THETA) -> list[list[tuple[str, float]]]:
    """Per-candidate supporting sequences passing the similarity threshold."""
    _check_theta(theta)
    if len(index) == 0:
        return [[] for _ in candidate_texts]
    return [retrieve(index, text, K_c, theta) for text in candidate_texts]


def format_support(support: list[list[tuple[str, float]]]) -> str:
    ids = option_alphabet(max(len(support), 1))
    blocks = [f"{o}. " + ". ".join(seq for seq, _ in hits) for o, hits in zip(ids, support) if hits]
    return " ".join(blocks)


def candidate_supporting_prompt(index: TrainingTextIndex, candidate_texts: Sequence[str],
                                K_c: int = DEFAULT_K_C, theta: float = DEFAULT_THETA) -> str:
    return format_support(candidate_support(index, candidate_texts, K_c, theta))
