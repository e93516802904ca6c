import random

import pytest

from manetsec.crypto import CipherSuite
from manetsec.protocol import GroupSession


def make_graph(edges):
    graph = {}
    for a, b in edges:
        graph.setdefault(a, set()).add(b)
        graph.setdefault(b, set()).add(a)
    return graph


# 18 nodes: root 1, checker 5 (one-hop neighbor of the root, outside the
# tree), 17 tree members in four levels below the root.
FIG4_EDGES = [
    (1, 2), (1, 3), (1, 4), (1, 5),
    (2, 6), (2, 7), (3, 8), (4, 9),
    (6, 10), (6, 11), (7, 12), (8, 13),
    (10, 14), (10, 15), (11, 16), (12, 17), (13, 18),
]


@pytest.fixture
def fig4_graph():
    return make_graph(FIG4_EDGES)


@pytest.fixture
def suite():
    return CipherSuite()


@pytest.fixture
def fig4_session(fig4_graph, suite):
    return GroupSession(fig4_graph, root=1, members=set(range(1, 19)),
                        suite=suite, seed=7, checker=5)


@pytest.fixture
def rng():
    return random.Random(1234)
