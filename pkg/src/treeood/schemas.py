"""marshmallow schemas for every JSON artifact treeood reads or writes.

* `GraphSchema` / `GraphCollectionSchema`: the JSON graph interchange format
  ``{"n": int, "edges": [[u, v], ...], "features": [[...], ...]}``.
* `CodingTreeSchema`: ``{"root": id, "nodes": [{"id", "parent", "children",
  "graph_node", "volume", "cut"}]}``.
* `WeightManifestSchema`: the JSON manifest embedded in weight files.
* `ScoreReportSchema`: ``report.json``, ``{"scores", "labels", "auc"}``.
"""

from __future__ import annotations

import typing

import marshmallow as ma
from marshmallow import validate

from treeood import fields
from treeood.graph import Graph, GraphCollection

__all__ = [
    "CodingTreeSchema",
    "GraphCollectionSchema",
    "GraphSchema",
    "ScoreReportSchema",
    "TensorSpecSchema",
    "TreeNodeSchema",
    "WeightManifestSchema",
]


class GraphSchema(ma.Schema):
    n = fields.Int(required=True, validate=validate.Range(min=0))
    edges = fields.EdgeList(load_default=list)
    features = fields.Matrix(load_default=None)

    @ma.validates_schema
    def validate_shapes(self, data: dict[str, typing.Any], **kwargs: typing.Any) -> None:
        edges = data.get("edges")
        if edges is not None and len(edges) and edges.max() >= data["n"]:
            raise ma.ValidationError("Edge endpoint outside [0, n).", "edges")
        features = data.get("features")
        if features is not None and features.shape[0] != data["n"]:
            raise ma.ValidationError("Feature matrix must have n rows.", "features")

    @ma.post_load
    def make_graph(self, data: dict[str, typing.Any], **kwargs: typing.Any) -> Graph:
        return Graph.from_edges(data["n"], data["edges"], data["features"])

    @ma.pre_dump
    def from_graph(self, graph: Graph, **kwargs: typing.Any) -> dict[str, typing.Any]:
        return {"n": graph.node_count, "edges": graph.edges, "features": graph.features}


class GraphCollectionSchema(ma.Schema):
    name = fields.Str(load_default="")
    graphs = fields.List(fields.Nested(GraphSchema), required=True)
    labels = fields.List(fields.Int(), load_default=None, allow_none=True)

    @ma.validates_schema
    def validate_labels(self, data: dict[str, typing.Any], **kwargs: typing.Any) -> None:
        labels = data.get("labels")
        if labels is not None and len(labels) != len(data["graphs"]):
            raise ma.ValidationError("One label per graph is required.", "labels")

    @ma.post_load
    def make_collection(
        self, data: dict[str, typing.Any], **kwargs: typing.Any
    ) -> GraphCollection:
        return GraphCollection(tuple(data["graphs"]), data["labels"], data["name"])

    @ma.pre_dump
    def from_collection(
        self, collection: GraphCollection, **kwargs: typing.Any
    ) -> dict[str, typing.Any]:
        labels = None if collection.labels is None else collection.labels.tolist()
        return {"name": collection.name, "graphs": list(collection), "labels": labels}


class TreeNodeSchema(ma.Schema):
    id = fields.Int(required=True, validate=validate.Range(min=0))
    parent = fields.Int(allow_none=True, load_default=None)
    children = fields.List(fields.Int(), load_default=list)
    graph_node = fields.Int(allow_none=True, load_default=None)
    volume = fields.Int(required=True, validate=validate.Range(min=0))
    cut = fields.Int(required=True, validate=validate.Range(min=0))


class CodingTreeSchema(ma.Schema):
    root = fields.Int(required=True)
    k = fields.Int(allow_none=True, load_default=None)
    nodes = fields.List(fields.Nested(TreeNodeSchema), required=True)

    @ma.validates_schema
    def validate_root(self, data: dict[str, typing.Any], **kwargs: typing.Any) -> None:
        ids = [node["id"] for node in data["nodes"]]
        if len(set(ids)) != len(ids):
            raise ma.ValidationError("Duplicate node ids.", "nodes")
        if data["root"] not in set(ids):
            raise ma.ValidationError("Root id is not a node.", "root")


class TensorSpecSchema(ma.Schema):
    name = fields.Str(required=True)
    shape = fields.List(fields.Int(validate=validate.Range(min=0)), required=True)


class WeightManifestSchema(ma.Schema):
    kind = fields.Str(required=True, validate=validate.OneOf(["graph", "tree"]))
    config = fields.Dict(keys=fields.Str(), required=True)
    frozen = fields.Bool(load_default=False)
    tensors = fields.List(fields.Nested(TensorSpecSchema), required=True)


class ScoreReportSchema(ma.Schema):
    scores = fields.List(fields.Float(allow_nan=False), required=True)
    labels = fields.List(fields.Bool(), load_default=None, allow_none=True)
    auc = fields.Float(
        load_default=None, allow_none=True, validate=validate.Range(min=0, max=1)
    )
    graph_ids = fields.List(fields.Int(), load_default=None, allow_none=True)

    @ma.validates_schema
    def validate_labels(self, data: dict[str, typing.Any], **kwargs: typing.Any) -> None:
        labels = data.get("labels")
        if labels is not None and len(labels) != len(data["scores"]):
            raise ma.ValidationError("One label per score is required.", "labels")
