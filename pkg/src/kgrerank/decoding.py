"""Permutation decoding over option identifiers and output diagnosis."""
from __future__ import annotations

import json
import shlex
import subprocess
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import kernels
from .verbalizer import option_alphabet

OK = "ok"
MISMATCH = "mismatch"
OMISSION = "omission"
DUPLICATION = "duplication"


class AdapterError(RuntimeError):
    """Transport failure or timeout talking to an external generator."""


@dataclass
class DecodeState:
    K: int
    emitted: list[int] = field(default_factory=list)

    @property
    def remaining(self) -> list[int]:
        done = set(self.emitted)
        return [i for i in range(self.K) if i not in done]


@dataclass
class ParseDiagnosis:
    outcome: str
    permutation: list[int] | None = None
    problems: list[str] = field(default_factory=list)
    emitted: list[int] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.outcome == OK


def _finite(logits, K):
    z = np.asarray(logits, dtype=np.float64)
    if z.shape != (K,):
        raise ValueError(f"expected {K} logits, got shape {z.shape}")
    if not np.isfinite(z).all():
        raise ValueError("non-finite logits from provider")
    return z


def constrained_greedy_decode(logit_provider: Callable[[DecodeState], Sequence[float]], K: int) -> list[int]:
    """Greedy decoding where emitted identifiers are masked out at every slot.

    Returns 0-based positions in emission order; always a permutation.
    Ties go to the lowest identifier.
    """
    if K < 1:
        raise ValueError("K must be at least 1")
    state = DecodeState(K)
    used = np.zeros(K, dtype=bool)
    for _ in range(K):
        z = _finite(logit_provider(state), K)
        pick = int(np.argmax(np.where(used, -np.inf, z)))
        used[pick] = True
        state.emitted.append(pick)
    return state.emitted


def decode_static(logits) -> list[int]:
    """Constrained greedy decoding of a fixed logit vector (compiled fast path)."""
    z = np.asarray(logits, dtype=np.float64)
    _finite(z, len(z))
    return kernels.masked_greedy(z).tolist()


def unconstrained_greedy_decode(logit_provider: Callable[[DecodeState], Sequence[float]], K: int) -> list[int]:
    """Greedy decoding without masking; repeats are possible."""
    state = DecodeState(K)
    for _ in range(K):
        z = _finite(logit_provider(state), K)
        state.emitted.append(int(np.argmax(z)))
    return state.emitted


def render(positions: Sequence[int], K: int) -> str:
    ids = option_alphabet(K)
    return " ".join(ids[p] for p in positions)


def parse_ranking(text: str, K: int, labels: Sequence[str] | None = None) -> ParseDiagnosis:
    """Classify generated text against the identifier set of size ``K``.

    Mismatch: the text names a candidate label instead of its identifier, or
    mixes identifiers with unknown symbols. Duplication: an identifier
    repeats. Omission: some identifier never appears (a refusal with no
    identifiers at all is a pure omission). ``ok`` carries a 1-based
    permutation. ``outcome`` is the first applicable failure in that order;
    ``problems`` lists all of them and ``emitted`` keeps recognised
    positions at first occurrence.
    """
    ids = option_alphabet(K)
    lookup = {o: i for i, o in enumerate(ids)}
    seen: list[int] = []
    unknown = dup = False
    for tok in text.replace(",", " ").split():
        tok = tok.rstrip(".")
        if tok not in lookup:
            unknown = True
            continue
        pos = lookup[tok]
        if pos in seen:
            dup = True
        else:
            seen.append(pos)
    lowered = text.lower()
    named = bool(labels) and any(lab.lower() in lowered for lab in labels if lab.strip())
    problems = []
    if named or (unknown and seen):
        problems.append(MISMATCH)
    if dup:
        problems.append(DUPLICATION)
    if len(seen) < K:
        problems.append(OMISSION)
    if not problems:
        return ParseDiagnosis(OK, [p + 1 for p in seen], [], seen)
    return ParseDiagnosis(problems[0], None, problems, seen)


def complete_ranking(emitted: Sequence[int], K: int) -> list[int]:
    """First occurrences of ``emitted`` followed by missing positions in order."""
    out = []
    for p in emitted:
        if p not in out:
            out.append(p)
    out.extend(p for p in range(K) if p not in out)
    return out


# --------------------------------------------------------------------------
# external generators


class SubprocessAdapter:
    """Talk to a generator process over stdin/stdout, one JSON object per line.

    Request: ``{"prompt": str, "identifiers": [str, ...]}``.
    Response: ``{"text": str, "steps": [{identifier: logit, ...}, ...]}``;
    ``steps`` is optional.
    """

    def __init__(self, command: str | Sequence[str], timeout: float = 60.0):
        self.args = shlex.split(command) if isinstance(command, str) else list(command)
        self.timeout = timeout

    def __call__(self, prompt: str, identifiers: Sequence[str]) -> dict:
        request = json.dumps({"prompt": prompt, "identifiers": list(identifiers)}) + "\n"
        try:
            proc = subprocess.run(self.args, input=request, capture_output=True, text=True,
                                  timeout=self.timeout, encoding="utf-8")
        except subprocess.TimeoutExpired as exc:
            raise AdapterError(f"generator timed out after {self.timeout}s") from exc
        except OSError as exc:
            raise AdapterError(f"cannot start generator: {exc}") from exc
        if proc.returncode != 0:
            raise AdapterError(f"generator exited with {proc.returncode}: {proc.stderr.strip()}")
        line = proc.stdout.strip().splitlines()
        if not line:
            raise AdapterError("generator produced no output")
        try:
            return json.loads(line[-1])
        except json.JSONDecodeError as exc:
            raise AdapterError(f"generator output is not JSON: {line[-1]!r}") from exc


def external_generate(adapter: Callable[[str, Sequence[str]], dict], prompt: str, K: int,
                      labels: Sequence[str] | None = None) -> ParseDiagnosis:
    """Run an external generator; decode its identifier logits when provided."""
    ids = option_alphabet(K)
    reply = adapter(prompt, ids)
    steps = reply.get("steps")
    if steps:
        def provider(state: DecodeState):
            step = steps[min(len(state.emitted), len(steps) - 1)]
            return [float(step.get(o, -1e30)) for o in ids]

        perm = constrained_greedy_decode(provider, K)
        return ParseDiagnosis(OK, [p + 1 for p in perm], [], perm)
    return parse_ranking(str(reply.get("text", "")), K, labels)
