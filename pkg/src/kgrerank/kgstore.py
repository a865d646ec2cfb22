"""Knowledge graph storage: TSV ingestion, splits, filter index, clusters."""
from __future__ import annotations

import logging
import os
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

logger = logging.getLogger(__name__)

SPLITS = ("train", "valid", "test")


class DatasetError(ValueError):
    """Raised for missing files, malformed lines or out-of-range indices."""


class Triple(NamedTuple):
    head: int
    rel: int
    tail: int


@dataclass
class KnowledgeGraph:
    entity_labels: list[str]
    relation_labels: list[str]
    train: np.ndarray
    valid: np.ndarray
    test: np.ndarray
    kind: str = "curated"
    entity_definitions: dict[int, str] = field(default_factory=dict)
    relation_templates: dict[int, str] = field(default_factory=dict)
    cluster_of: np.ndarray | None = None

    @property
    def entity_count(self) -> int:
        return len(self.entity_labels)

    @property
    def relation_count(self) -> int:
        return len(self.relation_labels)

    def split(self, name: str) -> np.ndarray:
        if name not in SPLITS:
            raise KeyError(name)
        return getattr(self, name)

    def triples(self, name: str) -> list[Triple]:
        return [Triple(*map(int, row)) for row in self.split(name)]

    def counts(self) -> dict[str, int]:
        return {
            "entities": self.entity_count,
            "relations": self.relation_count,
            "train": len(self.train),
            "valid": len(self.valid),
            "test": len(self.test),
        }

    def validate(self) -> None:
        """Check index bounds, non-empty labels and split disjointness."""
        for i, lab in enumerate(self.entity_labels):
            if not lab.strip():
                raise DatasetError(f"entity {i} has an empty label")
        for i, lab in enumerate(self.relation_labels):
            if not lab.strip():
                raise DatasetError(f"relation {i} has an empty label")
        seen: dict[tuple, str] = {}
        for name in SPLITS:
            arr = self.split(name)
            if len(arr) == 0:
                continue
            if (arr[:, [0, 2]] >= self.entity_count).any() or (arr < 0).any():
                raise DatasetError(f"{name}: entity index out of range")
            if (arr[:, 1] >= self.relation_count).any():
                raise DatasetError(f"{name}: relation index out of range")
            for row in map(tuple, arr.tolist()):
                other = seen.setdefault(row, name)
                if other != name:
                    raise DatasetError(f"triple {row} appears in both {other} and {name}")
        if self.cluster_of is not None and len(self.cluster_of) != self.entity_count:
            raise DatasetError("clusters must cover every entity")


@dataclass
class FilterIndex:
    tails_of: dict[tuple[int, int], set[int]]
    heads_of: dict[tuple[int, int], set[int]]

    def known(self, entity: int, rel: int, direction: str) -> set[int]:
        """True answers for ``(entity, rel, ?)`` (tail) or ``(?, rel, entity)`` (head)."""
        table = self.tails_of if direction == "tail" else self.heads_of
        return table.get((entity, rel), set())


def build_filter_index(kg: KnowledgeGraph) -> FilterIndex:
    tails_of: dict[tuple[int, int], set[int]] = defaultdict(set)
    heads_of: dict[tuple[int, int], set[int]] = defaultdict(set)
    for name in SPLITS:
        for h, r, t in kg.split(name).tolist():
            tails_of[(h, r)].add(t)
            heads_of[(t, r)].add(h)
    return FilterIndex(dict(tails_of), dict(heads_of))


# --------------------------------------------------------------------------
# file IO


def _read_tsv(path: Path, ncols: int):
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n").rstrip("\r")
            if not line.strip():
                continue
            parts = line.split("\t", ncols - 1)
            if len(parts) != ncols:
                raise DatasetError(f"{path}:{lineno}: expected {ncols} tab-separated fields")
            yield lineno, parts


def _read_labels(path: Path) -> list[str]:
    labels: dict[int, str] = {}
    for lineno, (idx, text) in _read_tsv(path, 2):
        try:
            i = int(idx)
        except ValueError:
            raise DatasetError(f"{path}:{lineno}: bad index {idx!r}") from None
        labels[i] = text
    n = len(labels)
    if sorted(labels) != list(range(n)):
        raise DatasetError(f"{path}: indices must be dense 0..{n - 1}")
    return [labels[i] for i in range(n)]


def _read_triples(path: Path, n_ent: int, n_rel: int) -> np.ndarray:
    rows = []
    for lineno, parts in _read_tsv(path, 3):
        try:
            h, r, t = (int(x) for x in parts)
        except ValueError:
            raise DatasetError(f"{path}:{lineno}: non-integer field") from None
        if not (0 <= h < n_ent and 0 <= t < n_ent):
            raise DatasetError(f"{path}:{lineno}: entity index out of range")
        if not 0 <= r < n_rel:
            raise DatasetError(f"{path}:{lineno}: relation index out of range")
        rows.append((h, r, t))
    counts = Counter(rows)
    dups = sum(c - 1 for c in counts.values() if c > 1)
    if dups:
        logger.warning("%s: %d duplicate triples kept", path, dups)
    return np.array(rows, dtype=np.int64).reshape(-1, 3)


def _read_index_map(path: Path, n: int, what: str) -> dict[int, str]:
    out = {}
    for lineno, (idx, text) in _read_tsv(path, 2):
        try:
            i = int(idx)
        except ValueError:
            raise DatasetError(f"{path}:{lineno}: bad index {idx!r}") from None
        if not 0 <= i < n:
            raise DatasetError(f"{path}:{lineno}: {what} index out of range")
        out[i] = text
    return out


def load_dataset(directory: str | os.PathLike, kind: str = "curated") -> KnowledgeGraph:
    """Load a dataset directory written in the TSV layout.

    Required: ``entities.tsv``, ``relations.tsv``, ``train.tsv``,
    ``valid.tsv``, ``test.tsv``. Optional: ``definitions.tsv``,
    ``clusters.tsv``, ``rel_templates.tsv``.
    """
    if kind not in ("curated", "open"):
        raise ValueError(f"kind must be 'curated' or 'open', got {kind!r}")
    d = Path(directory)
    for name in ("entities.tsv", "relations.tsv", *(f"{s}.tsv" for s in SPLITS)):
        if not (d / name).is_file():
            raise DatasetError(f"missing file: {d / name}")
    ents = _read_labels(d / "entities.tsv")
    rels = _read_labels(d / "relations.tsv")
    splits = {s: _read_triples(d / f"{s}.tsv", len(ents), len(rels)) for s in SPLITS}

    definitions = {}
    if (d / "definitions.tsv").is_file():
        definitions = _read_index_map(d / "definitions.tsv", len(ents), "entity")
    templates = {}
    if (d / "rel_templates.tsv").is_file():
        templates = _read_index_map(d / "rel_templates.tsv", len(rels), "relation")
        for r, pat in templates.items():
            if "[H]" not in pat or "[T]" not in pat:
                raise DatasetError(f"rel_templates.tsv: template for relation {r} lacks [H] or [T]")
    clusters = None
    if (d / "clusters.tsv").is_file():
        raw = _read_index_map(d / "clusters.tsv", len(ents), "entity")
        if len(raw) != len(ents):
            raise DatasetError("clusters.tsv must assign every entity")
        ids = np.array([int(raw[i]) for i in range(len(ents))], dtype=np.int64)
        # densify cluster ids in order of first appearance
        _, first = np.unique(ids, return_index=True)
        remap = {int(ids[j]): k for k, j in enumerate(sorted(first))}
        clusters = np.array([remap[int(c)] for c in ids], dtype=np.int64)

    kg = KnowledgeGraph(
        entity_labels=ents,
        relation_labels=rels,
        kind=kind,
        entity_definitions=definitions,
        relation_templates=templates,
        cluster_of=clusters,
        **splits,
    )
    kg.validate()
    return kg


def save_dataset(kg: KnowledgeGraph, directory: str | os.PathLike) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)

    def write(name, rows):
        with open(d / name, "w", encoding="utf-8", newline="\n") as fh:
            for row in rows:
                fh.write("\t".join(str(x) for x in row) + "\n")

    write("entities.tsv", enumerate(kg.entity_labels))
    write("relations.tsv", enumerate(kg.relation_labels))
    for s in SPLITS:
        write(f"{s}.tsv", kg.split(s).tolist())
    if kg.entity_definitions:
        write("definitions.tsv", sorted(kg.entity_definitions.items()))
    if kg.relation_templates:
        write("rel_templates.tsv", sorted(kg.relation_templates.items()))
    if kg.cluster_of is not None:
        write("clusters.tsv", enumerate(kg.cluster_of.tolist()))
