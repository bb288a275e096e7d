import logging

import numpy as np
import pytest

from treeood.exceptions import FormatError, ParameterError, ShapeError
from treeood.graph import (
    Graph,
    GraphCollection,
    augmented_view,
    degree_features,
    generate_er_graph,
    laplacian_positional_encoding,
    rw_diffusion_encoding,
)
from treeood.testing import (
    dense_rw_diagonals,
    k2,
    random_connected_graph,
    star,
    triangle,
    two_triangles_bridge,
)


@pytest.fixture
def bridge():
    return two_triangles_bridge()


def test_from_edges_canonicalizes():
    graph = Graph.from_edges(3, [(2, 1), (1, 0)])
    assert graph.edges.tolist() == [[0, 1], [1, 2]]
    assert graph.degrees.tolist() == [1, 2, 1]
    assert graph.features.shape == (3, 1)


def test_from_edges_drops_loops_and_duplicates(caplog):
    with caplog.at_level(logging.WARNING, logger="treeood.graph"):
        graph = Graph.from_edges(3, [(0, 1), (1, 0), (2, 2), (1, 2)])
    assert graph.edges.tolist() == [[0, 1], [1, 2]]
    assert "1 self-loop(s) and 1 duplicate edge(s)" in caplog.text


def test_from_edges_rejects_unknown_endpoint():
    with pytest.raises(FormatError):
        Graph.from_edges(2, [(0, 2)])


def test_constructor_requires_canonical_edges():
    with pytest.raises(FormatError):
        Graph(2, np.array([[1, 0]]), np.ones((2, 1)))


def test_constructor_checks_feature_rows():
    with pytest.raises(ShapeError):
        Graph(2, np.array([[0, 1]]), np.ones((3, 1)))


def test_graph_arrays_are_read_only():
    graph = triangle()
    with pytest.raises(ValueError):
        graph.edges[0, 0] = 2


def test_volume_and_counts(bridge):
    assert bridge.edge_count == 7
    assert bridge.volume == 14
    assert bridge.degrees.tolist() == [2, 2, 3, 3, 2, 2]
    assert bridge.isolated_nodes().tolist() == []


def test_adjacency_is_symmetric(bridge):
    adjacency = bridge.adjacency.toarray()
    assert np.array_equal(adjacency, adjacency.T)
    assert adjacency.sum() == 14


def test_equality_and_hash():
    assert triangle() == triangle()
    assert hash(triangle()) == hash(triangle())
    other = triangle().with_features(np.full((3, 1), 2.0))
    assert other != triangle()
    assert other.content_hash() != triangle().content_hash()


def test_to_networkx(bridge):
    nx_graph = bridge.to_networkx()
    assert nx_graph.number_of_nodes() == 6
    assert nx_graph.number_of_edges() == 7


def test_collection_subset_and_relabel():
    collection = GraphCollection((k2(), triangle()), np.array([0, 1]), "toy")
    assert len(collection) == 2
    part = collection.subset([1])
    assert part.graphs == (triangle(),)
    assert part.labels.tolist() == [1]
    assert part.name == "toy"
    assert collection.relabel([1, 1]).labels.tolist() == [1, 1]


def test_collection_rejects_label_mismatch():
    with pytest.raises(ShapeError):
        GraphCollection((k2(),), np.array([0, 1]))


# Erdős–Rényi generation


@pytest.mark.parametrize("n", [5, 10, 100])
def test_er_graph_has_twice_as_many_edges_as_nodes(n):
    graph = generate_er_graph(n, seed=0)
    assert graph.node_count == n
    assert graph.edge_count == 2 * n


def test_er_graph_is_deterministic():
    assert generate_er_graph(50, seed=3) == generate_er_graph(50, seed=3)
    assert generate_er_graph(50, seed=3) != generate_er_graph(50, seed=4)


@pytest.mark.parametrize("n", [0, 2, 4])
def test_er_graph_rejects_small_n(n):
    with pytest.raises(ParameterError):
        generate_er_graph(n, seed=0)


# positional encodings


def test_rw_encoding_of_k2_alternates():
    encoding = rw_diffusion_encoding(k2(), r=4)
    assert encoding.tolist() == [[0.0, 1.0, 0.0, 1.0], [0.0, 1.0, 0.0, 1.0]]


def test_rw_encoding_of_triangle():
    encoding = rw_diffusion_encoding(triangle(), r=2)
    np.testing.assert_allclose(encoding, [[0.0, 0.5]] * 3, atol=1e-15)


def test_rw_encoding_isolated_node_gets_zero_row(caplog):
    graph = Graph.from_edges(3, [(0, 1)])
    with caplog.at_level(logging.WARNING, logger="treeood.graph"):
        encoding = rw_diffusion_encoding(graph, r=3)
    assert encoding[2].tolist() == [0.0, 0.0, 0.0]
    assert "isolated" in caplog.text


def test_rw_encoding_rejects_zero_length():
    with pytest.raises(ParameterError):
        rw_diffusion_encoding(triangle(), r=0)


@pytest.mark.parametrize("seed", range(5))
def test_rw_encoding_matches_dense_powers(seed):
    rng = np.random.default_rng(seed)
    graph = random_connected_graph(9, rng)
    np.testing.assert_allclose(
        rw_diffusion_encoding(graph, r=6), dense_rw_diagonals(graph, 6), atol=1e-12
    )


def test_laplacian_encoding():
    graph = Graph.from_edges(3, [(0, 1)])
    assert laplacian_positional_encoding(graph).tolist() == [1.0, 1.0, 0.0]


def test_augmented_view_of_triangle():
    view = augmented_view(triangle(), r=2)
    np.testing.assert_allclose(view.combined, [[0.0, 0.5, 1.0]] * 3, atol=1e-15)
    assert view.rw_encoding.shape == (3, 2)
    assert view.lp_encoding.shape == (3,)


def test_degree_features_are_one_hot():
    graph = degree_features(star(5), 6)
    assert graph.features.shape == (5, 7)
    assert graph.features.sum(axis=1).tolist() == [1.0] * 5
    assert np.flatnonzero(graph.features[0]).tolist() == [4]
    assert np.flatnonzero(graph.features[1]).tolist() == [1]


def test_degree_features_cap_high_degrees():
    graph = degree_features(star(6), 3)
    assert graph.features[0].tolist() == [0.0, 0.0, 0.0, 1.0]
    assert graph.edges.tolist() == star(6).edges.tolist()


def test_degree_features_isolated_node():
    graph = degree_features(Graph.from_edges(3, [(0, 1)]), 2)
    assert graph.features[2].tolist() == [1.0, 0.0, 0.0]


def test_degree_features_rejects_zero_cap():
    with pytest.raises(ParameterError):
        degree_features(triangle(), 0)
