import itertools

import numpy as np
import pytest
from hypothesis import HealthCheck, settings, strategies as st

from gpse.graph import from_edge_list

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@st.composite
def graphs(draw, min_n=1, max_n=10, connected=False):
    """Random simple graphs; ``connected`` threads a random spanning tree first."""
    n = draw(st.integers(min_n, max_n))
    pairs = list(itertools.combinations(range(n), 2))
    mask = draw(st.lists(st.booleans(), min_size=len(pairs), max_size=len(pairs)))
    edges = [p for p, keep in zip(pairs, mask) if keep]
    if connected and n > 1:
        order = draw(st.permutations(range(n)))
        for k in range(1, n):
            parent = order[draw(st.integers(0, k - 1))]
            edges.append((parent, order[k]))
    return from_edge_list(n, edges)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance verdict lines, printed after the run regardless of capture
VERDICTS: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in VERDICTS:
            terminalreporter.write_line(line)
