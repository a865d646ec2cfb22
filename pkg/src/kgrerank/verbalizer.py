"""Text rendering of queries, candidates, targets and instruction prompts."""
from __future__ import annotations

import re
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from typing import Sequence

from .kge import Query
from .kgstore import KnowledgeGraph

BLANK = "____"

_TOKEN_RE = re.compile(r"[^\W_]+", re.UNICODE)


def tokenize(text: str) -> list[str]:
    """Lowercased word tokens; punctuation and underscores act as separators."""
    return _TOKEN_RE.findall(text.lower())


def option_identifier(i: int) -> str:
    """Identifier for 0-based position ``i``: A..Z, then AA, AB, ... (bijective base 26)."""
    if i < 0:
        raise ValueError("position must be non-negative")
    n = i + 1
    out = []
    while n:
        n, rem = divmod(n - 1, 26)
        out.append(chr(ord("A") + rem))
    return "".join(reversed(out))


@lru_cache(maxsize=None)
def option_alphabet(K: int) -> tuple[str, ...]:
    if K < 1:
        raise ValueError("K must be at least 1")
    return tuple(option_identifier(i) for i in range(K))


@dataclass
class PromptBundle:
    x_q: str
    x_c: str
    x_k_q: str = ""
    x_k_c: str = ""


class TemplateError(ValueError):
    pass


def _known_label(kg: KnowledgeGraph, query: Query) -> str:
    return kg.entity_labels[query.entity]


def make_query_sequence(kg: KnowledgeGraph, query: Query, definitions: bool = False) -> str:
    """Query text with :data:`BLANK` at the missing slot.

    Uses the relation template when one is loaded, otherwise concatenates
    the labels. With ``definitions`` the known entity's definition, if any,
    is appended in parentheses.
    """
    known = _known_label(kg, query)
    rel = kg.relation_labels[query.rel]
    pattern = kg.relation_templates.get(query.rel)
    if pattern is not None:
        if "[H]" not in pattern or "[T]" not in pattern:
            raise TemplateError(f"template for relation {query.rel} needs [H] and [T]: {pattern!r}")
        if query.direction == "tail":
            text = pattern.replace("[H]", known).replace("[T]", BLANK)
        else:
            text = pattern.replace("[H]", BLANK).replace("[T]", known)
    elif query.direction == "tail":
        text = f"{known} {rel} {BLANK}?"
    else:
        text = f"{BLANK} {rel} {known}?"
    if definitions:
        definition = kg.entity_definitions.get(query.entity)
        if definition:
            text = f"{text} ({definition})"
    return text


def fill_blank(x_q: str, label: str) -> str:
    """Candidate triple sequence: the query text with its blank filled."""
    return x_q.replace(BLANK, label, 1)


def make_triple_sequence(kg: KnowledgeGraph, head: int, rel: int, tail: int) -> str:
    x_q = make_query_sequence(kg, Query(head, rel, "tail"))
    return fill_blank(x_q, kg.entity_labels[tail])


def candidate_items(x_q: str, labels: Sequence[str], qci: bool) -> list[str]:
    return [fill_blank(x_q, lab) if qci else lab for lab in labels]


def make_candidate_sequence(x_q: str, labels: Sequence[str], qci: bool) -> str:
    items = candidate_items(x_q, labels, qci)
    ids = option_alphabet(len(items))
    return " ".join(f"{o}. {text}" for o, text in zip(ids, items))


@lru_cache(maxsize=None)
def load_template(knowledge_mode: bool) -> str:
    name = "template_knowledge.txt" if knowledge_mode else "template_in.txt"
    raw = resources.files("kgrerank").joinpath("data", name).read_text(encoding="utf-8")
    return raw.replace("\\n", "\n")


def assemble_input(bundle: PromptBundle, knowledge_mode: bool = False) -> str:
    text = load_template(knowledge_mode)
    # single pass so placeholder-like text inside the values is left alone
    values = {"{x_q}": bundle.x_q, "{x_c}": bundle.x_c}
    if knowledge_mode:
        values["{x_k_q}"] = bundle.x_k_q
        values["{x_k_c}"] = bundle.x_k_c
    pattern = re.compile("|".join(re.escape(k) for k in values))
    return pattern.sub(lambda m: values[m.group(0)], text)


def _check_permutation(permutation: Sequence[int]) -> int:
    K = len(permutation)
    if K == 0 or sorted(permutation) != list(range(1, K + 1)):
        raise ValueError(f"not a permutation of 1..{K}: {list(permutation)}")
    return K


def make_target(permutation: Sequence[int]) -> str:
    """Render a 1-based permutation of positions as identifiers, e.g. ``[3, 1, 2] -> "C A B"``."""
    K = _check_permutation(permutation)
    ids = option_alphabet(K)
    return " ".join(ids[p - 1] for p in permutation)
