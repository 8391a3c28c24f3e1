import os
import random
import sys

import pytest
from hypothesis import strategies as st

sys.path.insert(0, os.path.dirname(__file__))

from knuthsynth.cnf import Formula, SubproblemState  # noqa: E402

FIXTURES = os.path.join(os.path.dirname(__file__), "fixtures")


def fixture_path(name):
    return os.path.join(FIXTURES, name)


def fig1_formula(num_variables=7):
    """Smallest formula where branching on x6 first gives a three-node proof."""
    return Formula.from_clauses([[6, 7], [6, -7], [-6, 7], [-6, -7]], num_variables)


def raw_state(clauses, n=None):
    f = Formula.from_clauses(clauses, n)
    return SubproblemState(f, f.clauses, frozenset())


def five_node_formula():
    """x1 first: x1=F conflicts at once, x1=T needs one more split on x2."""
    return Formula.from_clauses([[1, 2], [1, -2], [-1, 2, 3], [-1, 2, -3], [-1, -2, 3],
                                 [-1, -2, -3]], 3)


@st.composite
def cnfs(draw, min_vars=1, max_vars=8, max_clauses=30):
    n = draw(st.integers(min_vars, max_vars))
    m = draw(st.integers(0, max_clauses))
    seed = draw(st.integers(0, 2 ** 32 - 1))
    rng = random.Random(seed)
    clauses = []
    for _ in range(m):
        k = rng.randint(1, min(3, n))
        vs = rng.sample(range(1, n + 1), k)
        clauses.append([v if rng.random() < 0.5 else -v for v in vs])
    return Formula.from_clauses(clauses, n)


def unsat_formulas(count, n_range=(6, 10), seed=0, pure=True):
    """Random UNSAT 3-CNF formulas (density above the threshold), checked by brute force."""
    from knuthsynth.cnf import brute_force_sat
    rng = random.Random(seed)
    out = []
    while len(out) < count:
        n = rng.randint(*n_range)
        m = int(n * rng.uniform(4.5, 7.0))
        clauses = []
        for _ in range(m):
            vs = rng.sample(range(1, n + 1), 3)
            clauses.append([v if rng.random() < 0.5 else -v for v in vs])
        f = Formula.from_clauses(clauses, n)
        if not brute_force_sat(f):
            out.append(f)
    return out


@pytest.fixture
def fig1():
    return fig1_formula()


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
