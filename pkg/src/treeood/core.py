from __future__ import annotations

import json
import logging
import os
import pathlib
import typing
import warnings

import marshmallow as ma
import numpy as np

from treeood.exceptions import FormatError, LoadError
from treeood.graph import Graph, GraphCollection
from treeood.schemas import GraphCollectionSchema, GraphSchema

logger = logging.getLogger(__name__)


__all__ = [
    "GraphParser",
    "dump",
    "parse",
    "parser",
]


PathLike = typing.Union[str, "os.PathLike[str]"]
ErrorHandler = typing.Callable[..., typing.NoReturn]
# type var for callables, to make type-preserving decorators
C = typing.TypeVar("C", bound=typing.Callable)
ErrorHandlerT = typing.TypeVar("ErrorHandlerT", bound=ErrorHandler)


def _callable_or_raise(obj: typing.Any) -> typing.Any:
    """Makes sure an object is callable if it is not ``None``. If not
    callable, a ValueError is raised.
    """
    if obj and not callable(obj):
        raise ValueError(f"{obj!r} is not callable.")
    return obj


def _read_table(
    path: pathlib.Path,
    *,
    dtype: type,
    columns: int | None = None,
    required: bool = False,
) -> np.ndarray | None:
    """Read one of the comma-separated TUDataset text files."""
    if not path.is_file():
        if required:
            raise LoadError(f"missing mandatory file {path.name}")
        return None
    try:
        with warnings.catch_warnings():
            # empty edge files are legal (all graphs edgeless)
            warnings.simplefilter("ignore", UserWarning)
            table = np.loadtxt(path, delimiter=",", dtype=dtype, ndmin=2)
    except ValueError as error:
        raise FormatError(f"{path.name}: {error}") from error
    if columns is not None:
        if table.size == 0:
            return table.reshape(0, columns)
        if table.shape[1] != columns:
            raise FormatError(
                f"{path.name}: expected {columns} column(s), found {table.shape[1]}"
            )
    return table


class GraphParser:
    """Loads a `GraphCollection` from disk.

    Descendant classes (or `format_loader` registrations) may add formats.
    Each loader receives a path and returns a `GraphCollection`.

    :param str format: Default format to use for data.
    :param callable error_handler: Custom error handler function.
    """

    #: Default format to assume when none is given
    DEFAULT_FORMAT: str = "tud"

    #: Maps format => method name
    __format_map__: dict[str, str | typing.Callable] = {
        "tud": "load_tud",
        "json": "load_json",
    }

    def __init__(
        self,
        format: str | None = None,
        *,
        error_handler: ErrorHandler | None = None,
    ) -> None:
        self.format = format or self.DEFAULT_FORMAT
        self.error_callback: ErrorHandler | None = _callable_or_raise(error_handler)
        # per-instance copy so registrations do not leak between parsers
        self.__format_map__ = dict(self.__format_map__)

    def _get_loader(self, format: str) -> typing.Callable:
        """Get the loader function for the given format.

        :raises: ValueError if a given format is invalid.
        """
        valid_formats = set(self.__format_map__.keys())
        if format not in valid_formats:
            raise ValueError(f"Invalid format argument: {format}")

        func = self.__format_map__[format]
        if isinstance(func, str):
            return getattr(self, func)
        return func

    def _on_load_error(
        self, error: Exception, path: PathLike, format: str
    ) -> typing.NoReturn:
        error_handler: ErrorHandler = self.error_callback or self.handle_error
        error_handler(error, path, format)

    def parse(
        self,
        path: PathLike,
        *,
        format: str | None = None,
    ) -> GraphCollection:
        """Main loading method.

        :param path: A dataset directory (``tud``) or file (``json``).
        :param str format: One of the keys of :py:attr:`~__format_map__`.
        :return: The loaded `GraphCollection`.
        """
        format = format or self.format
        loader = self._get_loader(format)
        try:
            collection = loader(path)
            collection = self.post_load(collection, path=path, format=format)
        except (LoadError, FormatError, ma.ValidationError) as error:
            self._on_load_error(error, path, format)
            raise ValueError(
                "_on_load_error hook did not raise an exception"
            ) from error
        logger.info(
            "loaded %d graph(s) from %s (%s)", len(collection), path, format
        )
        return collection

    def format_loader(self, name: str) -> typing.Callable[[C], C]:
        """Decorator that registers a function for loading a dataset format.
        The wrapped function receives a path.

        Example: ::

            from treeood import core

            parser = core.GraphParser()


            @parser.format_loader("edgelist")
            def load_edgelist(path):
                ...
        """

        def decorator(func: C) -> C:
            self.__format_map__[name] = func
            return func

        return decorator

    def error_handler(self, func: ErrorHandlerT) -> ErrorHandlerT:
        """Decorator that registers a custom error handling function. The
        function receives the raised error, the path and the format. Overrides
        the parser's ``handle_error`` method.
        """
        self.error_callback = func
        return func

    def post_load(
        self, collection: GraphCollection, *, path: PathLike, format: str
    ) -> GraphCollection:
        """A method of the parser which can transform a collection after
        loading. By default it does nothing, but users can subclass parsers
        and override this method.
        """
        return collection

    def handle_error(
        self, error: Exception, path: PathLike, format: str
    ) -> typing.NoReturn:
        """Called if an error occurs while loading. By default, just logs and
        raises ``error``.
        """
        logger.error(error)
        raise error

    # Loaders

    def _tud_prefix(self, directory: pathlib.Path) -> str:
        if not directory.is_dir():
            raise LoadError(f"{directory} is not a directory")
        if (directory / f"{directory.name}_A.txt").is_file():
            return directory.name
        candidates = sorted(p.name[: -len("_A.txt")] for p in directory.glob("*_A.txt"))
        if len(candidates) != 1:
            raise LoadError(
                f"expected exactly one *_A.txt file in {directory}, found {len(candidates)}"
            )
        return candidates[0]

    def load_tud(self, path: PathLike) -> GraphCollection:
        """Load a TUDataset directory (``DS_A.txt``, ``DS_graph_indicator.txt``
        and the optional label/attribute files).
        """
        directory = pathlib.Path(path)
        name = self._tud_prefix(directory)

        def file(suffix: str) -> pathlib.Path:
            return directory / f"{name}_{suffix}.txt"

        indicator = _read_table(file("graph_indicator"), dtype=np.int64, columns=1, required=True)
        raw_edges = _read_table(file("A"), dtype=np.int64, columns=2, required=True)
        assert indicator is not None and raw_edges is not None
        indicator = indicator[:, 0]
        total_nodes = len(indicator)
        if total_nodes == 0:
            raise FormatError("graph indicator is empty")
        if indicator.min() < 1:
            raise FormatError("graph indicator values must start at 1")
        graph_count = int(indicator.max())
        sizes = np.bincount(indicator - 1, minlength=graph_count)
        if np.any(sizes == 0):
            missing = np.flatnonzero(sizes == 0)[:5] + 1
            raise FormatError(f"graph indicator has gaps (no nodes for graph(s) {missing.tolist()})")

        if raw_edges.size and (raw_edges.min() < 1 or raw_edges.max() > total_nodes):
            raise FormatError("edge references an unknown node")
        edges = raw_edges - 1
        owner = indicator - 1
        if np.any(owner[edges[:, 0]] != owner[edges[:, 1]]):
            raise FormatError("edge connects nodes of different graphs")

        # graph-local ids: rank of the node among its graph's nodes
        order = np.argsort(owner, kind="stable")
        offsets = np.concatenate([[0], np.cumsum(sizes)])
        local = np.empty(total_nodes, dtype=np.int64)
        local[order] = np.arange(total_nodes) - offsets[owner[order]]

        features = self._tud_features(file, total_nodes)

        loops = edges[:, 0] == edges[:, 1]
        canonical = np.sort(edges[~loops], axis=1)
        if len(canonical):
            unique, counts = np.unique(canonical, axis=0, return_counts=True)
        else:
            unique, counts = canonical, np.zeros(0, dtype=np.int64)
        # both directions of an edge are listed by convention; more is a multi-edge
        multi = int(np.sum(np.maximum(counts - 2, 0)))
        if loops.any() or multi:
            logger.warning(
                "%s: dropped %d self-loop(s) and %d duplicate edge(s)",
                name,
                int(loops.sum()),
                multi,
            )
        edge_owner = owner[unique[:, 0]]
        edge_order = np.argsort(edge_owner, kind="stable")
        unique = unique[edge_order]
        edge_bounds = np.searchsorted(edge_owner[edge_order], np.arange(graph_count + 1))

        graphs = []
        for g in range(graph_count):
            members = order[offsets[g] : offsets[g + 1]]
            graph_edges = local[unique[edge_bounds[g] : edge_bounds[g + 1]]]
            graph_edges = np.sort(graph_edges, axis=1)
            graph_edges = graph_edges[np.lexsort((graph_edges[:, 1], graph_edges[:, 0]))]
            graphs.append(Graph(int(sizes[g]), graph_edges, features[members]))

        labels = _read_table(file("graph_labels"), dtype=np.int64, columns=1)
        if labels is not None:
            if len(labels) != graph_count:
                raise FormatError(
                    f"{len(labels)} graph labels for {graph_count} graphs"
                )
            labels = labels[:, 0]
        return GraphCollection(tuple(graphs), labels, name)

    def _tud_features(
        self, file: typing.Callable[[str], pathlib.Path], total_nodes: int
    ) -> np.ndarray:
        attributes = _read_table(file("node_attributes"), dtype=np.float64)
        if attributes is not None:
            if len(attributes) != total_nodes:
                raise FormatError(
                    f"{len(attributes)} attribute rows for {total_nodes} nodes"
                )
            return attributes
        node_labels = _read_table(file("node_labels"), dtype=np.int64)
        if node_labels is not None:
            if len(node_labels) != total_nodes:
                raise FormatError(
                    f"{len(node_labels)} node labels for {total_nodes} nodes"
                )
            vocabulary, index = np.unique(node_labels[:, 0], return_inverse=True)
            one_hot = np.zeros((total_nodes, len(vocabulary)))
            one_hot[np.arange(total_nodes), index.ravel()] = 1.0
            return one_hot
        return np.ones((total_nodes, 1))

    def load_json(self, path: PathLike) -> GraphCollection:
        """Load the JSON interchange format: either a single graph object
        ``{"n", "edges", "features"}`` or ``{"name", "graphs", "labels"}``.
        """
        try:
            with open(path, encoding="utf-8") as fp:
                data = json.load(fp)
        except OSError as error:
            raise LoadError(f"cannot read {path}: {error}") from error
        except json.JSONDecodeError as error:
            raise FormatError(f"{path}: invalid JSON ({error})") from error
        if isinstance(data, dict) and "n" in data:
            graph = GraphSchema().load(data)
            return GraphCollection((graph,), None, pathlib.Path(path).stem)
        return GraphCollectionSchema().load(data)

    # Writers

    def dump_tud(
        self,
        collection: GraphCollection,
        directory: PathLike,
        *,
        name: str | None = None,
    ) -> pathlib.Path:
        """Write ``collection`` as TUDataset flat files. Features are always
        written as node attributes, so parsing the result yields an equal
        collection.
        """
        directory = pathlib.Path(directory)
        name = name or collection.name or directory.name
        directory.mkdir(parents=True, exist_ok=True)
        offset = 0
        edge_rows = []
        indicator = []
        features = []
        for g, graph in enumerate(collection, start=1):
            for u, v in graph.edges.tolist():
                edge_rows.append(f"{u + offset + 1}, {v + offset + 1}")
                edge_rows.append(f"{v + offset + 1}, {u + offset + 1}")
            indicator.extend([str(g)] * graph.node_count)
            features.extend(
                ", ".join(f"{x:.17g}" for x in row) for row in graph.features.tolist()
            )
            offset += graph.node_count
        (directory / f"{name}_A.txt").write_text(_lines(edge_rows))
        (directory / f"{name}_graph_indicator.txt").write_text(_lines(indicator))
        (directory / f"{name}_node_attributes.txt").write_text(_lines(features))
        if collection.labels is not None:
            (directory / f"{name}_graph_labels.txt").write_text(
                _lines(str(label) for label in collection.labels.tolist())
            )
        return directory

    def dump_json(self, collection: GraphCollection, path: PathLike) -> None:
        with open(path, "w", encoding="utf-8") as fp:
            json.dump(GraphCollectionSchema().dump(collection), fp)


def _lines(rows: typing.Iterable[str]) -> str:
    text = "\n".join(rows)
    return text + "\n" if text else ""


parser = GraphParser()
parse = parser.parse
dump = parser.dump_tud
