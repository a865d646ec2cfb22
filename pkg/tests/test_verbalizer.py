from pathlib import Path

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from kgrerank.decoding import parse_ranking
from kgrerank.kge import Query
from kgrerank.verbalizer import (
    BLANK,
    PromptBundle,
    TemplateError,
    assemble_input,
    make_candidate_sequence,
    make_query_sequence,
    make_target,
    option_alphabet,
    option_identifier,
    tokenize,
)

DATA = Path(__file__).parent / "data"
MOVIES = ["Ip Man", "King of Comedy", "Police Story"]


class TestQuerySequence:
    def test_template_tail(self, tiny_kg):
        assert make_query_sequence(tiny_kg, Query(0, 0, "tail")) == "Jackie Chan played in movie ____?"

    def test_template_head(self, tiny_kg):
        assert make_query_sequence(tiny_kg, Query(1, 0, "head")) == "____ played in movie Ip Man?"

    def test_concatenation_without_template(self, tiny_kg):
        assert make_query_sequence(tiny_kg, Query(0, 1, "tail")) == "Jackie Chan born in ____?"
        assert make_query_sequence(tiny_kg, Query(4, 1, "head")) == "____ born in Hong Kong?"

    def test_definition_appended(self, tiny_kg):
        x = make_query_sequence(tiny_kg, Query(0, 1), definitions=True)
        assert x == "Jackie Chan born in ____? (Hong Kong actor)"
        assert make_query_sequence(tiny_kg, Query(1, 1), definitions=True) == "Ip Man born in ____?"

    def test_bad_template(self, tiny_kg):
        tiny_kg.relation_templates[1] = "[H] was born"
        with pytest.raises(TemplateError):
            make_query_sequence(tiny_kg, Query(0, 1))


class TestCandidateSequence:
    def test_bare_names(self):
        x_c = make_candidate_sequence("Jackie Chan played in movie ____?", MOVIES, qci=False)
        assert x_c == "A. Ip Man B. King of Comedy C. Police Story"

    def test_interaction(self):
        x_c = make_candidate_sequence("Jackie Chan played in movie ____?", MOVIES, qci=True)
        assert x_c.startswith("A. Jackie Chan played in movie Ip Man? B. ")
        assert x_c.endswith("C. Jackie Chan played in movie Police Story?")

    def test_single(self):
        assert make_candidate_sequence("x ____?", ["y"], qci=False) == "A. y"


class TestTemplates:
    def test_golden_prompt(self, tiny_kg):
        x_q = make_query_sequence(tiny_kg, Query(0, 0))
        text = assemble_input(PromptBundle(x_q, make_candidate_sequence(x_q, MOVIES, qci=True)))
        assert text.encode("utf-8") == (DATA / "golden_prompt.txt").read_bytes()

    def test_plain_ends_with_response(self):
        assert assemble_input(PromptBundle("q", "c")).endswith("### Response: ")

    def test_knowledge_mode_empty_support(self):
        text = assemble_input(PromptBundle("q", "c", "qp", ""), knowledge_mode=True)
        assert "### Supporting information: qp\n\n" in text
        assert "### Candidate supporting knowledge: \n\n### Question: q\n\nc ### Response: " in text

    def test_placeholder_text_in_values_untouched(self):
        text = assemble_input(PromptBundle("{x_c}", "C"))
        assert "### Question: {x_c}\n\nC ###" in text


class TestIdentifiers:
    def test_alphabet(self):
        assert option_alphabet(3) == ("A", "B", "C")
        assert option_identifier(25) == "Z"
        assert option_identifier(26) == "AA"
        assert option_identifier(27) == "AB"
        assert option_identifier(26 + 26 * 26) == "AAA"
        assert len(set(option_alphabet(800))) == 800

    def test_target_examples(self):
        assert make_target([3, 1, 2]) == "C A B"
        assert make_target([1, 2]) == "A B"

    def test_target_rejects_non_permutation(self):
        for bad in ([1, 1], [0, 1], [], [2, 3]):
            with pytest.raises(ValueError):
                make_target(bad)

    def test_target_parse_round_trip(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            K = int(rng.integers(1, 31))
            perm = (rng.permutation(K) + 1).tolist()
            diag = parse_ranking(make_target(perm), K)
            assert diag.ok and diag.permutation == perm

    @given(st.integers(0, 10**6), st.integers(0, 10**6))
    def test_identifiers_injective(self, a, b):
        assert (option_identifier(a) == option_identifier(b)) == (a == b)


def test_tokenize():
    assert tokenize("Jackie Chan played in ____? (Hong-Kong)") == ["jackie", "chan", "played", "in", "hong", "kong"]
    assert BLANK not in " ".join(tokenize(BLANK))
