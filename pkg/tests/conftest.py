import numpy as np
import pytest

from frailforest.data import AdjacencyGraph
from frailforest.spatial import CarStructure


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)


@pytest.fixture
def edge_graph():
    """Two nodes joined by one edge."""
    return AdjacencyGraph(np.array([[0.0, 1.0], [1.0, 0.0]]))


@pytest.fixture
def path3_graph():
    """Path 1 - 2 - 3."""
    return AdjacencyGraph.from_edges([(1, 2), (2, 3)], 3)


@pytest.fixture
def edge_structure(edge_graph):
    return CarStructure.from_graph(edge_graph)


@pytest.fixture
def path3_structure(path3_graph):
    return CarStructure.from_graph(path3_graph)
