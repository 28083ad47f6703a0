import numpy as np
import pytest
from hypothesis import strategies as st

from fedgroups.params import ParamVector, WeightedModel

finite = st.floats(min_value=-1e6, max_value=1e6, allow_nan=False, allow_infinity=False)
names = st.text(alphabet="abcdefghij_", min_size=1, max_size=4)
shapes = st.dictionaries(names, st.integers(1, 4), min_size=1, max_size=3)


@st.composite
def params_of(draw, shape, elements=finite):
    return ParamVector({n: draw(st.lists(elements, min_size=k, max_size=k)) for n, k in shape.items()})


@st.composite
def param_vectors(draw, elements=finite):
    return draw(params_of(draw(shapes), elements))


@st.composite
def same_shape_pair(draw, elements=finite):
    shape = draw(shapes)
    return draw(params_of(shape, elements)), draw(params_of(shape, elements))


@st.composite
def update_sets(draw, min_size=1, max_size=8, elements=finite, weights=st.floats(0.01, 1e3)):
    shape = draw(shapes)
    n = draw(st.integers(min_size, max_size))
    return [
        WeightedModel(draw(params_of(shape, elements)), draw(weights), 0, f"c{i:02d}")
        for i in range(n)
    ]


def pv(**entries):
    return ParamVector(entries)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_graph(rng, n_nodes=None, p_directed=0.3, p_undirected=0.2, acyclic=True):
    """Random topology; directed edges only go from lower to higher index when acyclic."""
    from fedgroups.topology import TopologyGraph

    n = n_nodes or int(rng.integers(1, 12))
    ids = [f"n{i:02d}" for i in rng.permutation(n)]
    g = TopologyGraph()
    for i in ids:
        g.add_node(i)
    for a in range(n):
        for b in range(n):
            if a == b:
                continue
            if (a < b or not acyclic) and rng.random() < p_directed / (1 if acyclic else 2):
                g.add_edge(ids[a], ids[b])
            elif a < b and rng.random() < p_undirected:
                g.add_edge(ids[a], ids[b], directed=False)
    return g


def random_two_level_tree(rng):
    """Root -> 2..5 mid hubs -> 1..6 leaves each, with random leaf weights and values."""
    from fedgroups.topology import TopologyGraph

    g = TopologyGraph().add_node("root")
    leaves = {}
    for h in range(int(rng.integers(2, 6))):
        hub = f"hub{h}"
        g.add_node(hub).add_edge("root", hub)
        for k in range(int(rng.integers(1, 7))):
            leaf = f"leaf{h}_{k}"
            g.add_node(leaf).add_edge(hub, leaf)
            leaves[leaf] = (float(rng.uniform(0.1, 100.0)), rng.normal(0, 10, size=5))
    return g, leaves
