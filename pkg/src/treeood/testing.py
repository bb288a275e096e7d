"""Utilities for testing. Includes toy graphs, independent reference
implementations used as oracles, and a base test class for anything that
produces coding trees.

.. warning::

    Methods and functions in this module may change without
    warning and without a major version change.
"""

import itertools
import math

import numpy as np
import pytest

from treeood.codingtree import (
    CodingTree,
    init_flat_tree,
    structural_entropy,
    validate_tree,
)
from treeood.graph import Graph, GraphCollection


def k2():
    return Graph.from_edges(2, [(0, 1)])


def triangle():
    return Graph.from_edges(3, [(0, 1), (1, 2), (0, 2)])


def path(n):
    return Graph.from_edges(n, [(i, i + 1) for i in range(n - 1)])


def star(n):
    return Graph.from_edges(n, [(0, i) for i in range(1, n)])


def two_triangles_bridge():
    """Triangles {0, 1, 2} and {3, 4, 5} joined by the edge (2, 3)."""
    return Graph.from_edges(
        6, [(0, 1), (1, 2), (0, 2), (3, 4), (4, 5), (3, 5), (2, 3)]
    )


def random_tree_graph(n, rng):
    """Uniformly attached random tree: node ``i`` links to a random earlier node."""
    edges = [(int(rng.integers(0, i)), i) for i in range(1, n)]
    return Graph.from_edges(n, edges)


def random_connected_graph(n, rng, extra_edges=None):
    """A random spanning tree plus ``extra_edges`` random chords."""
    tree = random_tree_graph(n, rng)
    pairs = [pair for pair in itertools.combinations(range(n), 2)]
    present = set(map(tuple, tree.edges.tolist()))
    absent = [pair for pair in pairs if pair not in present]
    if extra_edges is None:
        extra_edges = int(rng.integers(0, len(absent) + 1)) if absent else 0
    chosen = rng.permutation(len(absent))[: min(extra_edges, len(absent))]
    edges = sorted(present) + [absent[i] for i in chosen]
    return Graph.from_edges(n, edges)


def dense_random_graph(n, density, rng):
    """A random graph holding ``ceil(density * n (n-1) / 2)`` edges."""
    pairs = list(itertools.combinations(range(n), 2))
    count = math.ceil(density * len(pairs))
    chosen = rng.permutation(len(pairs))[:count]
    return Graph.from_edges(n, [pairs[i] for i in chosen])


def synthetic_collection(kind, count, seed, sizes=(10, 14), density=0.6, name=""):
    """``count`` random trees (``kind="tree"``) or dense graphs (``kind="dense"``)
    with node counts drawn from ``sizes`` inclusive."""
    rng = np.random.default_rng(seed)
    graphs = []
    for _ in range(count):
        n = int(rng.integers(sizes[0], sizes[1] + 1))
        if kind == "tree":
            graphs.append(random_tree_graph(n, rng))
        else:
            graphs.append(dense_random_graph(n, density, rng))
    return GraphCollection(tuple(graphs), None, name or kind)


def reference_entropy(graph, tree):
    """Structural entropy recomputed from raw edges and leaf sets only."""
    total = 2 * len(graph.edges)
    degrees = [0] * graph.node_count
    for u, v in graph.edges.tolist():
        degrees[u] += 1
        degrees[v] += 1

    def stats(handle):
        leaves = set(tree.leaves_under(handle))
        volume = sum(degrees[v] for v in leaves)
        cut = sum((u in leaves) != (v in leaves) for u, v in graph.edges.tolist())
        return volume, cut

    result = 0.0
    for handle, node in tree.nodes.items():
        if node.parent is None:
            continue
        volume, cut = stats(handle)
        parent_volume, _ = stats(node.parent)
        if cut and volume:
            result -= cut / total * math.log2(volume / parent_volume)
    return result


def set_partitions(items):
    if not items:
        yield []
        return
    first, rest = items[0], items[1:]
    for partition in set_partitions(rest):
        yield [[first], *partition]
        for i in range(len(partition)):
            yield partition[:i] + [[first, *partition[i]]] + partition[i + 1 :]


def partition_entropy(graph, partition):
    """Entropy of the height-2 tree root -> communities -> leaves."""
    total = graph.volume
    degrees = graph.degrees.tolist()
    edges = graph.edges.tolist()
    result = 0.0
    for community in partition:
        members = set(community)
        volume = sum(degrees[v] for v in members)
        cut = sum((u in members) != (v in members) for u, v in edges)
        if cut and volume:
            result -= cut / total * math.log2(volume / total)
        for v in members:
            if degrees[v]:
                result -= degrees[v] / total * math.log2(degrees[v] / volume)
    return result


def exhaustive_two_level_optimum(graph):
    """Minimum entropy over all height-2 trees; only for tiny graphs."""
    return min(
        partition_entropy(graph, partition)
        for partition in set_partitions(list(range(graph.node_count)))
    )


def dense_rw_diagonals(graph, r):
    """Return probabilities of ``RW = A D^-1`` by dense matrix powers."""
    n = graph.node_count
    adjacency = np.zeros((n, n))
    for u, v in graph.edges.tolist():
        adjacency[u, v] = adjacency[v, u] = 1.0
    degrees = adjacency.sum(axis=0)
    inverse = np.array([1.0 / d if d else 0.0 for d in degrees])
    walk = adjacency @ np.diag(inverse)
    power = np.eye(n)
    columns = []
    for _ in range(r):
        power = power @ walk
        columns.append(np.diag(power).copy())
    return np.stack(columns, axis=1)


class CommonTreeTestCase:
    """Base test class for coding tree sources. Subclasses must define
    `make_tree`, which returns a `CodingTree` of height at most ``k``.
    """

    def make_tree(self, graph, k):
        """Return a coding tree for ``graph``"""
        raise NotImplementedError("Must define make_tree()")

    @pytest.fixture(params=[2, 3])
    def k(self, request):
        return request.param

    @pytest.fixture(
        params=["triangle", "path", "star", "two_triangles_bridge"],
    )
    def graph(self, request):
        return {
            "triangle": triangle(),
            "path": path(7),
            "star": star(6),
            "two_triangles_bridge": two_triangles_bridge(),
        }[request.param]

    def test_tree_is_valid(self, graph, k):
        assert validate_tree(graph, self.make_tree(graph, k)) == []

    def test_height_at_most_k(self, graph, k):
        assert self.make_tree(graph, k).height <= k

    def test_entropy_not_above_flat_tree(self, graph, k):
        tree = self.make_tree(graph, k)
        flat = init_flat_tree(graph)
        assert structural_entropy(graph, tree) <= structural_entropy(graph, flat) + 1e-12

    def test_entropy_matches_reference(self, graph, k):
        tree = self.make_tree(graph, k)
        assert structural_entropy(graph, tree) == pytest.approx(
            reference_entropy(graph, tree), abs=1e-12
        )

    def test_leaves_cover_graph_nodes(self, graph, k):
        tree = self.make_tree(graph, k)
        assert sorted(tree.leaf_of_graph_node) == list(range(graph.node_count))

    def test_serialization_round_trip(self, graph, k):
        tree = self.make_tree(graph, k)
        assert CodingTree.from_dict(tree.to_dict(), graph) == tree

    def test_deterministic(self, graph, k):
        assert self.make_tree(graph, k) == self.make_tree(graph, k)

    def test_two_triangles_split_at_the_bridge(self, k):
        graph = two_triangles_bridge()
        tree = self.make_tree(graph, k)
        assert sorted(tree.communities()) == [[0, 1, 2], [3, 4, 5]]
