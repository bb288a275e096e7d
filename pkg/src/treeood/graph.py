"""Graph representation, synthetic generation and positional-encoding views.

Graphs are undirected and simple. Node ids are 0-based; edges are stored once
as ``(u, v)`` pairs with ``u < v`` in lexicographic order, so two graphs with
the same structure always hold identical edge arrays.

.. code-block:: python

    from treeood.graph import Graph, augmented_view

    triangle = Graph.from_edges(3, [(0, 1), (1, 2), (0, 2)])
    view = augmented_view(triangle, r=2)
    view.combined  # rows [0, 0.5, 1]
"""

from __future__ import annotations

import dataclasses
import functools
import hashlib
import logging
import typing

import networkx as nx
import numpy as np
import scipy.sparse as sp

from treeood.exceptions import FormatError, ParameterError, ShapeError

logger = logging.getLogger(__name__)

__all__ = [
    "DEFAULT_WALK_LENGTH",
    "Graph",
    "GraphCollection",
    "PositionalView",
    "augmented_view",
    "degree_features",
    "generate_er_graph",
    "laplacian_positional_encoding",
    "rw_diffusion_encoding",
]

#: Default walk length ``r`` of the random-walk diffusion encoding
DEFAULT_WALK_LENGTH: int = 16

EdgeLike = typing.Union[np.ndarray, typing.Iterable[typing.Sequence[int]]]


def _readonly(array: np.ndarray) -> np.ndarray:
    array.setflags(write=False)
    return array


@dataclasses.dataclass(frozen=True, eq=False)
class Graph:
    """An undirected simple graph with a node feature matrix.

    Use `Graph.from_edges` to build one from raw (possibly messy) edge lists;
    the constructor itself only accepts canonical edge arrays.

    :param int node_count: Number of nodes ``n``.
    :param edges: ``(m, 2)`` integer array, ``u < v``, sorted, no duplicates.
    :param features: ``(n, d_f)`` real feature matrix.
    """

    node_count: int
    edges: np.ndarray
    features: np.ndarray
    degrees: np.ndarray = dataclasses.field(init=False)

    def __post_init__(self) -> None:
        n = self.node_count
        edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        features = np.asarray(self.features, dtype=np.float64)
        if n < 0:
            raise ParameterError(f"node_count must be non-negative, got {n}")
        if features.ndim != 2 or features.shape[0] != n:
            raise ShapeError(
                f"features must have shape ({n}, d_f), got {features.shape}"
            )
        if edges.size:
            if edges.min() < 0 or edges.max() >= n:
                raise FormatError(f"edge endpoint outside [0, {n})")
            if np.any(edges[:, 0] >= edges[:, 1]):
                raise FormatError("edges must be stored as (u, v) with u < v")
            order = np.lexsort((edges[:, 1], edges[:, 0]))
            if np.any(order != np.arange(len(edges))):
                raise FormatError("edges must be sorted lexicographically")
            if np.any(np.all(np.diff(edges, axis=0) == 0, axis=1)):
                raise FormatError("duplicate edges")
        degrees = np.bincount(edges.ravel(), minlength=n).astype(np.int64)
        object.__setattr__(self, "edges", _readonly(edges))
        object.__setattr__(self, "features", _readonly(features))
        object.__setattr__(self, "degrees", _readonly(degrees))

    @classmethod
    def from_edges(
        cls,
        node_count: int,
        edges: EdgeLike,
        features: np.ndarray | None = None,
    ) -> Graph:
        """Build a graph, dropping self-loops and duplicate edges.

        Both are counted and reported on the warning channel. Missing features
        default to an all-ones column (``d_f = 1``).
        """
        raw = np.asarray(list(edges) if not isinstance(edges, np.ndarray) else edges)
        raw = raw.astype(np.int64).reshape(-1, 2)
        if raw.size and (raw.min() < 0 or raw.max() >= node_count):
            raise FormatError(f"edge endpoint outside [0, {node_count})")
        loops = raw[:, 0] == raw[:, 1]
        canonical = np.sort(raw[~loops], axis=1)
        unique = np.unique(canonical, axis=0) if len(canonical) else canonical
        duplicates = len(canonical) - len(unique)
        if loops.any() or duplicates:
            logger.warning(
                "dropped %d self-loop(s) and %d duplicate edge(s)",
                int(loops.sum()),
                duplicates,
            )
        if features is None:
            features = np.ones((node_count, 1))
        return cls(node_count, unique, features)

    @property
    def edge_count(self) -> int:
        return len(self.edges)

    @property
    def volume(self) -> int:
        """vol(V): the sum of all degrees, ``2 * |E|``."""
        return int(self.degrees.sum())

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    @functools.cached_property
    def adjacency(self) -> sp.csr_matrix:
        """Symmetric 0/1 adjacency matrix in CSR form."""
        n = self.node_count
        rows = np.concatenate([self.edges[:, 0], self.edges[:, 1]])
        cols = np.concatenate([self.edges[:, 1], self.edges[:, 0]])
        data = np.ones(len(rows))
        return sp.csr_matrix((data, (rows, cols)), shape=(n, n))

    def isolated_nodes(self) -> np.ndarray:
        return np.flatnonzero(self.degrees == 0)

    def with_features(self, features: np.ndarray) -> Graph:
        """Return the same structure carrying a different feature matrix."""
        return Graph(self.node_count, self.edges, np.asarray(features))

    def content_hash(self) -> str:
        """Stable digest of structure and features, used as a cache key."""
        digest = hashlib.sha256()
        digest.update(np.int64(self.node_count).tobytes())
        digest.update(np.ascontiguousarray(self.edges, dtype="<i8").tobytes())
        digest.update(np.int64(self.feature_dim).tobytes())
        digest.update(np.ascontiguousarray(self.features, dtype="<f8").tobytes())
        return digest.hexdigest()

    def to_networkx(self) -> nx.Graph:
        graph = nx.Graph()
        graph.add_nodes_from(range(self.node_count))
        graph.add_edges_from(map(tuple, self.edges.tolist()))
        return graph

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Graph):
            return NotImplemented
        return (
            self.node_count == other.node_count
            and np.array_equal(self.edges, other.edges)
            and np.array_equal(self.features, other.features)
        )

    def __hash__(self) -> int:
        return hash(self.content_hash())


@dataclasses.dataclass(frozen=True, eq=False)
class GraphCollection:
    """A named sequence of graphs with optional per-graph integer labels."""

    graphs: tuple[Graph, ...]
    labels: np.ndarray | None = None
    name: str = ""

    def __post_init__(self) -> None:
        object.__setattr__(self, "graphs", tuple(self.graphs))
        if self.labels is not None:
            labels = _readonly(np.asarray(self.labels, dtype=np.int64))
            if len(labels) != len(self.graphs):
                raise ShapeError(
                    f"{len(labels)} labels given for {len(self.graphs)} graphs"
                )
            object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return len(self.graphs)

    def __iter__(self) -> typing.Iterator[Graph]:
        return iter(self.graphs)

    def __getitem__(self, index: int) -> Graph:
        return self.graphs[index]

    def subset(self, indices: typing.Sequence[int], name: str | None = None) -> GraphCollection:
        indices = list(indices)
        labels = None if self.labels is None else self.labels[indices]
        return GraphCollection(
            tuple(self.graphs[i] for i in indices),
            labels,
            self.name if name is None else name,
        )

    def relabel(self, labels: typing.Sequence[int] | np.ndarray) -> GraphCollection:
        return GraphCollection(self.graphs, np.asarray(labels), self.name)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, GraphCollection):
            return NotImplemented
        if (self.labels is None) != (other.labels is None):
            return False
        if self.labels is not None and not np.array_equal(self.labels, other.labels):
            return False
        return self.name == other.name and self.graphs == other.graphs

    __hash__ = None  # type: ignore[assignment]


@dataclasses.dataclass(frozen=True, eq=False)
class PositionalView:
    """The perturbation-free augmented view: structure unchanged, features
    replaced by ``[rw || lp]``."""

    rw_encoding: np.ndarray
    lp_encoding: np.ndarray
    combined: np.ndarray


def generate_er_graph(node_count: int, seed: int) -> Graph:
    """Erdős–Rényi graph with exactly ``2 * node_count`` distinct edges.

    Features are a single all-ones column. The same seed always yields the
    same edge set.
    """
    if node_count < 3:
        raise ParameterError(f"node_count must be >= 3, got {node_count}")
    edge_count = 2 * node_count
    if node_count * (node_count - 1) // 2 < edge_count:
        raise ParameterError(
            f"{node_count} nodes cannot host {edge_count} distinct edges"
        )
    nx_graph = nx.gnm_random_graph(node_count, edge_count, seed=seed)
    edges = np.array(list(nx_graph.edges()), dtype=np.int64).reshape(-1, 2)
    return Graph.from_edges(node_count, edges)


def _warn_isolated(graph: Graph, what: str) -> None:
    isolated = graph.isolated_nodes()
    if len(isolated):
        logger.warning(
            "%d isolated node(s) get an all-zero %s", len(isolated), what
        )


def rw_diffusion_encoding(graph: Graph, r: int = DEFAULT_WALK_LENGTH) -> np.ndarray:
    """Return the ``(n, r)`` matrix whose column ``t`` is ``diag(RW^(t+1))``
    with ``RW = A D^-1``: the probability that a walk returns to its start
    after ``t + 1`` steps.
    """
    if r < 1:
        raise ParameterError(f"walk length r must be >= 1, got {r}")
    n = graph.node_count
    degrees = graph.degrees.astype(np.float64)
    inverse = np.zeros(n)
    np.divide(1.0, degrees, out=inverse, where=degrees > 0)
    _warn_isolated(graph, "random-walk encoding")
    walk = (graph.adjacency @ sp.diags(inverse)).tocsr()
    encoding = np.empty((n, r))
    power = walk
    encoding[:, 0] = power.diagonal()
    for step in range(1, r):
        power = (power @ walk).tocsr()
        encoding[:, step] = power.diagonal()
    return encoding


def laplacian_positional_encoding(graph: Graph) -> np.ndarray:
    """Diagonal of ``I - D^-1/2 A D^-1/2``; isolated nodes get 0."""
    degrees = graph.degrees.astype(np.float64)
    self_loops = graph.adjacency.diagonal()
    encoding = np.zeros(graph.node_count)
    connected = degrees > 0
    encoding[connected] = 1.0 - self_loops[connected] / degrees[connected]
    return encoding


def augmented_view(graph: Graph, r: int = DEFAULT_WALK_LENGTH) -> PositionalView:
    rw = rw_diffusion_encoding(graph, r)
    lp = laplacian_positional_encoding(graph)
    combined = np.hstack([rw, lp[:, None]])
    return PositionalView(
        _readonly(rw), _readonly(lp), _readonly(combined)
    )


def degree_features(graph: Graph, max_degree: int) -> Graph:
    """Replace the node features of ``graph`` by one-hot degrees.

    Column ``d`` marks nodes of degree ``d``; degrees above ``max_degree``
    share the last column, so the width is always ``max_degree + 1``.
    """
    if max_degree < 1:
        raise ParameterError(f"max_degree must be >= 1, got {max_degree}")
    features = np.zeros((graph.node_count, max_degree + 1))
    features[np.arange(graph.node_count), np.minimum(graph.degrees, max_degree)] = 1.0
    return graph.with_features(features)
