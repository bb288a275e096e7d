"""End-to-end orchestration.

.. code-block:: python

    from treeood import core, pipeline
    from treeood.config import load_config

    config = load_config("run.json")
    encoder = pipeline.pretrain(config, core.parse(config.id_train))
    _, report = pipeline.detect(
        encoder, config, core.parse(config.id_test), core.parse(config.ood_test)
    )
    report.auc
"""

from __future__ import annotations

import concurrent.futures
import dataclasses
import itertools
import json
import logging
import os
import pathlib
import typing

import numpy as np
import torch

from treeood.codingtree import CodingTree, build_coding_tree
from treeood.config import RunConfig
from treeood.exceptions import BatchSizeError, ParameterError, ShapeError
from treeood.graph import Graph, GraphCollection, augmented_view, degree_features
from treeood.losses import LossConfig, ScoreReport, combined_objective, info_nce
from treeood.metrics import auc
from treeood.nn import (
    GraphEncoder,
    TreeEncoder,
    loss_gradient,
    make_optimizer,
    sgd_step,
    tree_forward,
)

logger = logging.getLogger(__name__)

__all__ = [
    "RunConfig",
    "align_features",
    "anomaly_split",
    "detect",
    "fixed_batches",
    "node_features",
    "preprocess_trees",
    "pretrain",
    "split_id",
    "test_time_adapt",
]


def fixed_batches(count: int, batch_size: int, seed: int) -> list[np.ndarray]:
    """Split a seeded permutation of ``range(count)`` into batches; a trailing
    batch of one joins the batch before it.

    :raises BatchSizeError: if fewer than two samples are available.
    """
    if count < 2:
        raise BatchSizeError(f"need at least 2 graphs to form a batch, got {count}")
    if batch_size < 2:
        raise BatchSizeError(f"batch_size must be >= 2, got {batch_size}")
    order = np.random.default_rng(seed).permutation(count)
    batches = [order[i : i + batch_size] for i in range(0, count, batch_size)]
    if len(batches[-1]) == 1:
        tail = batches.pop()
        batches[-1] = np.concatenate([batches[-1], tail])
    return batches


def _loss_config(config: RunConfig) -> LossConfig:
    return LossConfig(tau=config.tau, lambda_=config.lambda_)


def node_features(config: RunConfig, collection: GraphCollection) -> GraphCollection:
    """Swap in one-hot degree features when ``config.degree_features`` is set;
    otherwise return ``collection`` unchanged."""
    if config.degree_features is None:
        return collection
    return GraphCollection(
        tuple(degree_features(graph, config.degree_features) for graph in collection),
        collection.labels,
        collection.name,
    )


def pretrain(
    config: RunConfig,
    id_train: GraphCollection,
    *,
    history: list[float] | None = None,
) -> GraphEncoder:
    """Train the GIN encoder contrastively on ID graphs and return it frozen.

    The basic view (node features ``X``, or one-hot degrees when
    ``config.degree_features`` is set) is embedded by the returned encoder;
    the positional view (``[rw || lp]``) by an auxiliary GIN that is discarded.
    Batches shorter than two graphs are skipped.

    :param history: If given, receives the mean loss of every epoch.
    """
    if not len(id_train):
        raise ParameterError("cannot pretrain on an empty collection")
    id_train = node_features(config, id_train)
    widths = {graph.feature_dim for graph in id_train}
    if len(widths) != 1:
        raise ShapeError(f"training graphs disagree on feature width: {sorted(widths)}")
    encoder = GraphEncoder(
        widths.pop(), config.hidden_dim, config.hidden_dim, seed=config.seed
    )
    positional = GraphEncoder(
        config.r + 1, config.hidden_dim, config.hidden_dim, seed=config.seed + 1
    )
    views = [augmented_view(graph, config.r).combined for graph in id_train]
    module = torch.nn.ModuleDict({"basic": encoder, "positional": positional})
    optimizer = make_optimizer(module, config.lr)
    rng = np.random.default_rng(config.seed)

    for epoch in range(config.epochs_pretrain):
        order = rng.permutation(len(id_train))
        losses = []
        for start in range(0, len(order), config.batch_size):
            batch = order[start : start + config.batch_size]
            if len(batch) < 2:
                logger.warning("skipping a pre-training batch of %d graph(s)", len(batch))
                continue

            z_basic = torch.stack([encoder(id_train[i]) for i in batch])
            z_positional = torch.stack([positional(id_train[i], views[i]) for i in batch])
            loss = info_nce(z_basic, z_positional, config.tau).value
            losses.append(loss.item())
            sgd_step(module, loss_gradient(module, {"contrastive": loss}), optimizer)
        if losses:
            mean = float(np.mean(losses))
            logger.info("pretrain epoch %d: loss %.6f", epoch + 1, mean)
            if history is not None:
                history.append(mean)
    encoder.freeze()
    return encoder


def _build_tree(graph: Graph, k: int) -> CodingTree | None:
    if graph.edge_count == 0:
        return None
    return build_coding_tree(graph, k)


def _cache_path(cache_dir: str, graph: Graph, k: int) -> pathlib.Path:
    return pathlib.Path(cache_dir) / f"{graph.content_hash()}-k{k}.json"


def preprocess_trees(
    config: RunConfig, graphs: GraphCollection
) -> list[CodingTree | None]:
    """Build one coding tree of height at most ``config.k`` per graph.

    Trees are cached under ``config.cache_dir`` (if set) keyed by graph hash
    and ``k``, and built in ``config.workers`` processes. Edgeless graphs get
    ``None`` and a warning.
    """
    k = config.k
    trees: list[CodingTree | None] = [None] * len(graphs)
    pending = []
    for index, graph in enumerate(graphs):
        if config.cache_dir is not None:
            path = _cache_path(config.cache_dir, graph, k)
            if path.exists():
                with open(path, encoding="utf-8") as fp:
                    trees[index] = CodingTree.from_dict(json.load(fp), graph)
                continue
        pending.append(index)
    logger.debug("%d tree(s) from cache, %d to build", len(graphs) - len(pending), len(pending))

    if config.workers > 1 and len(pending) > 1:
        with concurrent.futures.ProcessPoolExecutor(config.workers) as pool:
            built = list(
                pool.map(
                    _build_tree,
                    [graphs[i] for i in pending],
                    itertools.repeat(k),
                )
            )
    else:
        built = [_build_tree(graphs[i], k) for i in pending]

    skipped = 0
    for index, tree in zip(pending, built):
        if tree is None:
            skipped += 1
            continue
        if tree.graph is not graphs[index]:
            tree.graph = graphs[index]
        trees[index] = tree
        if config.cache_dir is not None:
            os.makedirs(config.cache_dir, exist_ok=True)
            with open(_cache_path(config.cache_dir, graphs[index], k), "w", encoding="utf-8") as fp:
                json.dump(tree.to_dict(), fp)
    if skipped:
        logger.warning("skipped %d edgeless graph(s): no coding tree", skipped)
    return trees


def test_time_adapt(
    frozen: GraphEncoder,
    config: RunConfig,
    test_graphs: GraphCollection,
    trees: typing.Sequence[CodingTree],
    *,
    history: list[float] | None = None,
) -> tuple[TreeEncoder, ScoreReport]:
    """Train a tree encoder on unlabeled test graphs and score them.

    Graph embeddings come from the frozen encoder once; only the tree encoder
    is updated, for ``config.epochs_testtime`` epochs over fixed seeded
    batches. Scores are the per-graph terms of the objective in a final
    gradient-free pass. Labels of ``test_graphs`` (if any) only feed the AUC.
    """
    if len(trees) != len(test_graphs):
        raise ShapeError(f"{len(trees)} trees given for {len(test_graphs)} graphs")
    if not frozen.frozen:
        raise ParameterError("test-time adaptation needs a frozen graph encoder")
    loss_config = _loss_config(config)
    batches = fixed_batches(len(test_graphs), config.batch_size, config.seed)
    with torch.no_grad():
        z_graph = torch.stack([frozen(graph) for graph in test_graphs])

    widths = {graph.feature_dim for graph in test_graphs}
    if len(widths) != 1:
        raise ShapeError(f"test graphs disagree on feature width: {sorted(widths)}")
    encoder = TreeEncoder(
        widths.pop(), config.hidden_dim, frozen.out_dim, k=config.k, seed=config.seed
    )
    optimizer = make_optimizer(encoder, config.lr)

    def batch_objective(batch: np.ndarray) -> tuple[typing.Any, dict[str, torch.Tensor]]:
        z_tree = torch.stack([tree_forward(encoder, trees[i])[0] for i in batch])
        return combined_objective(
            z_graph[torch.from_numpy(batch)], z_tree, loss_config, config.objective
        )

    for epoch in range(config.epochs_testtime):
        losses = []
        for batch in batches:
            terms, parts = batch_objective(batch)
            losses.append(terms.value.item())
            gradient = loss_gradient(encoder, parts)
            sgd_step(encoder, gradient, optimizer)
        mean = float(np.mean(losses))
        logger.info("test-time epoch %d: loss %.6f", epoch + 1, mean)
        if history is not None:
            history.append(mean)

    scores = np.empty(len(test_graphs))
    with torch.no_grad():
        for batch in batches:
            terms, _ = batch_objective(batch)
            scores[batch] = terms.per_sample.numpy()

    is_ood = None
    area = None
    if test_graphs.labels is not None:
        is_ood = test_graphs.labels.astype(bool)
        if is_ood.any() and not is_ood.all():
            area = auc(scores, is_ood)
    report = ScoreReport(scores, is_ood, area, np.arange(len(test_graphs)))
    return encoder, report


def align_features(collection: GraphCollection, width: int) -> GraphCollection:
    """Zero-pad node features on the right to ``width`` columns.

    :raises ShapeError: if a graph already has more columns.
    """
    graphs = []
    for graph in collection:
        if graph.feature_dim > width:
            raise ShapeError(
                f"graph features have {graph.feature_dim} columns, encoder takes {width}"
            )
        if graph.feature_dim == width:
            graphs.append(graph)
            continue
        padded = np.zeros((graph.node_count, width))
        padded[:, : graph.feature_dim] = graph.features
        graphs.append(graph.with_features(padded))
    return GraphCollection(tuple(graphs), collection.labels, collection.name)


def detect(
    frozen: GraphEncoder,
    config: RunConfig,
    id_test: GraphCollection,
    ood_test: GraphCollection,
) -> tuple[TreeEncoder, ScoreReport]:
    """Score the union of ``id_test`` and ``ood_test``.

    Node features go through `node_features` and are padded to the encoder
    width. Graphs without a coding tree are left out; ``graph_ids`` of the
    report index the concatenation ``id_test + ood_test``.
    """
    id_test = align_features(node_features(config, id_test), frozen.input_dim)
    ood_test = align_features(node_features(config, ood_test), frozen.input_dim)
    merged = GraphCollection(
        id_test.graphs + ood_test.graphs,
        np.r_[np.zeros(len(id_test), dtype=np.int64), np.ones(len(ood_test), dtype=np.int64)],
        f"{id_test.name}+{ood_test.name}",
    )
    trees = preprocess_trees(config, merged)
    kept = [index for index, tree in enumerate(trees) if tree is not None]
    encoder, report = test_time_adapt(
        frozen,
        config,
        merged.subset(kept),
        [typing.cast(CodingTree, trees[index]) for index in kept],
    )
    report = dataclasses.replace(report, graph_ids=np.asarray(kept))
    if report.auc is not None:
        logger.info("AUC %.4f over %d graphs", report.auc, len(kept))
    return encoder, report


def split_id(
    collection: GraphCollection, seed: int, train_fraction: float = 0.9
) -> tuple[GraphCollection, GraphCollection]:
    """Seeded train/test split of one ID dataset (90/10 by default)."""
    if not 0.0 < train_fraction < 1.0:
        raise ParameterError(f"train_fraction must lie in (0, 1), got {train_fraction}")
    order = np.random.default_rng(seed).permutation(len(collection))
    cut = int(round(train_fraction * len(collection)))
    return (
        collection.subset(sorted(order[:cut]), f"{collection.name}-train"),
        collection.subset(sorted(order[cut:]), f"{collection.name}-test"),
    )


def anomaly_split(
    collection: GraphCollection, seed: int, train_fraction: float = 0.9
) -> tuple[GraphCollection, GraphCollection]:
    """Split a labelled dataset for anomaly detection.

    The least frequent class is anomalous (the larger label on a tie). The
    training part holds only normal graphs; the test part holds the remaining
    normal graphs and every anomaly, relabelled ``0`` normal / ``1`` anomalous.
    """
    if collection.labels is None:
        raise ParameterError("anomaly split needs graph labels")
    values, counts = np.unique(collection.labels, return_counts=True)
    if len(values) < 2:
        raise ParameterError("anomaly split needs at least two classes")
    anomalous = values[counts == counts.min()].max()
    normal = np.flatnonzero(collection.labels != anomalous)
    anomalies = np.flatnonzero(collection.labels == anomalous)
    normal = np.random.default_rng(seed).permutation(normal)
    cut = int(round(train_fraction * len(normal)))
    train = collection.subset(sorted(normal[:cut]), f"{collection.name}-normal")
    test_indices = sorted(normal[cut:]) + sorted(anomalies)
    test = collection.subset(test_indices, f"{collection.name}-test")
    test = test.relabel(np.r_[np.zeros(len(normal) - cut), np.ones(len(anomalies))])
    return train, test
