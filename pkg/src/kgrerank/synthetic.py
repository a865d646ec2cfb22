"""Seeded synthetic knowledge graphs with planted compositional structure.

Every entity is a (category, region) pair and its label is the two
attribute words. Base relations map a category through a fixed permutation
and shift the region; the remaining relations are compositions of two base
relations, so their answers follow from chaining. Each candidate fact is
kept with probability ``density`` and the kept facts are split at random.
"""
from __future__ import annotations

import numpy as np

from .kgstore import KnowledgeGraph

_SYLLABLES = ["ka", "lo", "mi", "ne", "ru", "sa", "to", "vi", "ze", "bo", "du", "fe", "gi", "ho", "ju", "pa"]


def _words(rng: np.random.Generator, n: int, length: int) -> list[str]:
    out: set[str] = set()
    words = []
    while len(words) < n:
        w = "".join(rng.choice(_SYLLABLES, size=length))
        if w not in out:
            out.add(w)
            words.append(w)
    return words


def make_synthetic_kg(
    n_categories: int = 10,
    n_regions: int = 20,
    n_relations: int = 20,
    n_base: int = 8,
    density: float = 0.5,
    valid_frac: float = 0.1,
    test_frac: float = 0.1,
    max_shift: int = 0,
    seed: int = 0,
    kind: str = "curated",
) -> KnowledgeGraph:
    rng = np.random.default_rng(seed)
    n_ent = n_categories * n_regions
    cat_words = _words(rng, n_categories, 2)
    reg_words = _words(rng, n_regions, 3)
    labels = [f"{cat_words[e // n_regions]} {reg_words[e % n_regions]}" for e in range(n_ent)]

    cat_maps = [rng.permutation(n_categories) for _ in range(n_base)]
    shifts = [int(rng.integers(0, max_shift + 1)) for _ in range(n_base)]
    rel_words = _words(rng, n_relations, 3)
    rel_labels = []
    for r in range(n_relations):
        if r < n_base:
            rel_labels.append(f"has {rel_words[r]}")
        else:
            a, b = rng.choice(n_base, size=2, replace=False)
            cat_maps.append(cat_maps[b][cat_maps[a]])
            shifts.append(shifts[a] + shifts[b])
            rel_labels.append(f"has {rel_words[a]} {rel_words[b]}")

    facts = []
    for r in range(n_relations):
        for h in range(n_ent):
            c, g = divmod(h, n_regions)
            t = int(cat_maps[r][c]) * n_regions + (g + shifts[r]) % n_regions
            if rng.random() < density:
                facts.append((h, r, t))
    facts = np.array(facts, dtype=np.int64)
    facts = facts[rng.permutation(len(facts))]
    n_test = int(round(test_frac * len(facts)))
    n_valid = int(round(valid_frac * len(facts)))
    test = facts[:n_test]
    valid = facts[n_test : n_test + n_valid]
    train = facts[n_test + n_valid :]
    kg = KnowledgeGraph(
        entity_labels=labels,
        relation_labels=rel_labels,
        train=train,
        valid=valid,
        test=test,
        kind=kind,
        cluster_of=np.arange(n_ent, dtype=np.int64) if kind == "open" else None,
    )
    kg.validate()
    return kg
