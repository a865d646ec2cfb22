import numpy as np
import pytest

from kgrerank import _pykernels
from kgrerank.kge import train_kge
from kgrerank.kgstore import KnowledgeGraph
from kgrerank.synthetic import make_synthetic_kg

try:
    from kgrerank import _ckernels
except ImportError:  # pragma: no cover
    _ckernels = None

BACKENDS = [pytest.param(_pykernels, id="numpy")]
if _ckernels is not None:
    BACKENDS.append(pytest.param(_ckernels, id="cython"))


@pytest.fixture(params=BACKENDS)
def backend(request):
    return request.param


def _arr(rows):
    return np.array(rows, dtype=np.int64).reshape(-1, 3)


@pytest.fixture
def tiny_kg():
    """5 entities, 2 relations, with templates and definitions."""
    return KnowledgeGraph(
        entity_labels=["Jackie Chan", "Ip Man", "King of Comedy", "Police Story", "Hong Kong"],
        relation_labels=["played in movie", "born in"],
        train=_arr([(0, 0, 1), (0, 0, 2), (0, 1, 4)]),
        valid=_arr([(1, 1, 4)]),
        test=_arr([(0, 0, 3)]),
        entity_definitions={0: "Hong Kong actor"},
        relation_templates={0: "[H] played in movie [T]?"},
    )


@pytest.fixture(scope="session")
def synth_kg():
    return make_synthetic_kg(seed=0)


@pytest.fixture(scope="session")
def synth_kge(synth_kg):
    return train_kge(synth_kg, d=32, epochs=40, lr=0.005, seed=0)


# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
