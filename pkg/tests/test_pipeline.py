import functools
import logging
import math
from unittest import mock

import numpy as np
import pytest
import torch

from treeood import pipeline
from treeood.codingtree import build_coding_tree, validate_tree
from treeood.config import OBJECTIVES, load_config
from treeood.exceptions import BatchSizeError, ParameterError, ShapeError
from treeood.graph import Graph, GraphCollection
from treeood.metrics import auc
from treeood.nn import GraphEncoder
from treeood.testing import k2, synthetic_collection, triangle, two_triangles_bridge
from treeood.weights import to_bytes


def small_config(**overrides):
    values = {
        "hidden_dim": 8,
        "r": 3,
        "batch_size": 4,
        "epochs_pretrain": 2,
        "epochs_testtime": 2,
        "lr": 0.01,
    }
    values.update(overrides)
    return load_config(overrides=values)


@pytest.fixture
def frozen():
    encoder = GraphEncoder(1, 8, 8, seed=0)
    encoder.freeze()
    return encoder


@pytest.fixture
def labelled_graphs():
    trees = synthetic_collection("tree", 5, seed=0)
    dense = synthetic_collection("dense", 5, seed=1)
    return GraphCollection(trees.graphs + dense.graphs, [0] * 5 + [1] * 5, "mix")


# batching


def test_fixed_batches_merge_a_single_tail():
    batches = pipeline.fixed_batches(5, 2, seed=0)
    assert [len(batch) for batch in batches] == [2, 3]
    assert sorted(np.concatenate(batches).tolist()) == [0, 1, 2, 3, 4]


def test_fixed_batches_are_seeded():
    first = pipeline.fixed_batches(10, 4, seed=3)
    second = pipeline.fixed_batches(10, 4, seed=3)
    assert [b.tolist() for b in first] == [b.tolist() for b in second]
    assert [len(batch) for batch in first] == [4, 4, 2]


@pytest.mark.parametrize(("count", "batch_size"), [(1, 4), (0, 4), (5, 1)])
def test_fixed_batches_need_two_samples(count, batch_size):
    with pytest.raises(BatchSizeError):
        pipeline.fixed_batches(count, batch_size, seed=0)


# pre-training


def test_pretrain_with_zero_learning_rate_keeps_initial_weights():
    collection = synthetic_collection("tree", 4, seed=2)
    encoder = pipeline.pretrain(small_config(lr=0.0, epochs_pretrain=1), collection)
    initial = GraphEncoder(1, 8, 8, seed=0)
    assert encoder.frozen
    for name, tensor in initial.state_dict().items():
        assert torch.equal(encoder.state_dict()[name], tensor), name


def test_pretrain_is_reproducible():
    collection = synthetic_collection("tree", 4, seed=3)
    first, second = [], []
    a = pipeline.pretrain(small_config(epochs_pretrain=1), collection, history=first)
    b = pipeline.pretrain(small_config(epochs_pretrain=1), collection, history=second)
    assert len(first) == 1
    assert first == second
    assert to_bytes(a) == to_bytes(b)


def test_pretrain_first_epoch_loss():
    # zero features give zero basic embeddings: every similarity is 0 and
    # each of the 4 samples scores log(3) against its 3 negatives
    graphs = synthetic_collection("tree", 4, seed=3).graphs
    collection = GraphCollection(
        tuple(graph.with_features(np.zeros((graph.node_count, 1))) for graph in graphs)
    )
    history = []
    pipeline.pretrain(small_config(epochs_pretrain=1), collection, history=history)
    assert history == [pytest.approx(1.0986122886681098, abs=1e-12)]
    assert history[0] == pytest.approx(math.log(3), abs=1e-12)


@pytest.mark.filterwarnings("error::UserWarning")
def test_training_loops_raise_no_user_warnings(frozen, labelled_graphs):
    history = []
    pipeline.pretrain(
        small_config(epochs_pretrain=1), synthetic_collection("tree", 4, seed=3), history=history
    )
    adapt(frozen, labelled_graphs, epochs_testtime=1)
    assert len(history) == 1


def test_pretrain_on_degree_features():
    collection = synthetic_collection("tree", 4, seed=3)
    encoder = pipeline.pretrain(small_config(epochs_pretrain=1, degree_features=5), collection)
    assert encoder.input_dim == 6


def test_pretrain_skips_short_batches(caplog):
    collection = synthetic_collection("tree", 5, seed=4)
    history = []
    with caplog.at_level(logging.WARNING, logger="treeood.pipeline"):
        pipeline.pretrain(small_config(epochs_pretrain=1), collection, history=history)
    assert "skipping a pre-training batch of 1" in caplog.text
    assert len(history) == 1


def test_pretrain_rejects_mixed_feature_widths():
    collection = GraphCollection((k2(), triangle().with_features(np.ones((3, 2)))))
    with pytest.raises(ShapeError):
        pipeline.pretrain(small_config(), collection)


def test_pretrain_rejects_empty_collection():
    with pytest.raises(ParameterError):
        pipeline.pretrain(small_config(), GraphCollection(()))


@pytest.mark.slow
def test_pretrain_loss_goes_down():
    collection = synthetic_collection("tree", 16, seed=5)
    first, last = [], []
    for seed in range(3):
        history = []
        pipeline.pretrain(
            small_config(seed=seed, epochs_pretrain=10, batch_size=8), collection, history=history
        )
        first.append(history[0])
        last.append(history[-1])
    assert np.mean(last) <= np.mean(first)


# tree preprocessing


def test_preprocess_trees_builds_valid_trees():
    graphs = GraphCollection((triangle(), two_triangles_bridge(), k2()))
    trees = pipeline.preprocess_trees(small_config(), graphs)
    assert len(trees) == 3
    for graph, tree in zip(graphs, trees):
        assert tree.graph is graph
        assert validate_tree(graph, tree) == []


def test_preprocess_trees_skips_edgeless_graphs(caplog):
    graphs = GraphCollection((triangle(), Graph.from_edges(4, [])))
    with caplog.at_level(logging.WARNING, logger="treeood.pipeline"):
        trees = pipeline.preprocess_trees(small_config(), graphs)
    assert trees[1] is None
    assert trees[0] is not None
    assert "1 edgeless" in caplog.text


def test_preprocess_trees_cache(tmp_path):
    config = small_config(cache_dir=str(tmp_path))
    graphs = GraphCollection((triangle(), two_triangles_bridge()))
    built = pipeline.preprocess_trees(config, graphs)
    assert len(list(tmp_path.glob("*-k2.json"))) == 2
    with mock.patch("treeood.pipeline.build_coding_tree") as build:
        cached = pipeline.preprocess_trees(config, graphs)
    build.assert_not_called()
    assert cached == built


def test_preprocess_trees_cache_is_keyed_by_height(tmp_path):
    graphs = GraphCollection((two_triangles_bridge(),))
    pipeline.preprocess_trees(small_config(cache_dir=str(tmp_path), k=2), graphs)
    pipeline.preprocess_trees(small_config(cache_dir=str(tmp_path), k=3), graphs)
    assert sorted(path.name.rsplit("-", 1)[1] for path in tmp_path.iterdir()) == [
        "k2.json",
        "k3.json",
    ]


def test_preprocess_trees_calls_builder_with_height():
    graphs = GraphCollection((triangle(),))
    with mock.patch("treeood.pipeline.build_coding_tree", wraps=build_coding_tree) as build:
        pipeline.preprocess_trees(small_config(k=4), graphs)
    build.assert_called_once_with(graphs[0], 4)


@pytest.mark.slow
def test_preprocess_trees_in_worker_processes():
    graphs = synthetic_collection("dense", 6, seed=6)
    parallel = pipeline.preprocess_trees(small_config(workers=2), graphs)
    serial = pipeline.preprocess_trees(small_config(), graphs)
    assert parallel == serial
    assert all(tree.graph is graph for tree, graph in zip(parallel, graphs))


# test-time adaptation


def adapt(frozen, graphs, **overrides):
    config = small_config(**overrides)
    trees = pipeline.preprocess_trees(config, graphs)
    return pipeline.test_time_adapt(frozen, config, graphs, trees)


def test_adapt_without_epochs_still_scores(frozen, labelled_graphs):
    encoder, report = adapt(frozen, labelled_graphs, epochs_testtime=0)
    assert report.scores.shape == (10,)
    assert np.isfinite(report.scores).all()
    assert report.is_ood.tolist() == [False] * 5 + [True] * 5
    assert 0.0 <= report.auc <= 1.0
    assert report.graph_ids.tolist() == list(range(10))
    assert encoder.k == 2


def test_adapt_leaves_frozen_encoder_untouched(frozen, labelled_graphs):
    before = to_bytes(frozen)
    adapt(frozen, labelled_graphs, epochs_testtime=3)
    assert to_bytes(frozen) == before


def test_adapt_is_deterministic(frozen, labelled_graphs):
    history = [[], []]
    reports = []
    for runs in history:
        config = small_config()
        trees = pipeline.preprocess_trees(config, labelled_graphs)
        _, report = pipeline.test_time_adapt(
            frozen, config, labelled_graphs, trees, history=runs
        )
        reports.append(report)
    assert reports[0] == reports[1]
    assert history[0] == history[1]
    assert len(history[0]) == 2


def test_adapt_auc_matches_scores(frozen, labelled_graphs):
    _, report = adapt(frozen, labelled_graphs)
    assert report.auc == auc(report.scores, report.is_ood)


def test_adapt_without_labels_has_no_auc(frozen):
    graphs = synthetic_collection("tree", 4, seed=7)
    _, report = adapt(frozen, graphs)
    assert report.is_ood is None
    assert report.auc is None


def test_adapt_needs_frozen_encoder(labelled_graphs):
    with pytest.raises(ParameterError):
        adapt(GraphEncoder(1, 8, 8), labelled_graphs)


def test_adapt_needs_one_tree_per_graph(frozen, labelled_graphs):
    config = small_config()
    trees = pipeline.preprocess_trees(config, labelled_graphs)
    with pytest.raises(ShapeError):
        pipeline.test_time_adapt(frozen, config, labelled_graphs, trees[:-1])


def test_adapt_needs_two_graphs(frozen):
    graphs = GraphCollection((triangle(),))
    with pytest.raises(BatchSizeError):
        adapt(frozen, graphs)


# detection


def test_align_features_pads_with_zeros():
    collection = GraphCollection((k2(),), [1], "one")
    aligned = pipeline.align_features(collection, 3)
    assert aligned[0].features.tolist() == [[1.0, 0.0, 0.0], [1.0, 0.0, 0.0]]
    assert aligned.labels.tolist() == [1]
    assert aligned.name == "one"
    with pytest.raises(ShapeError):
        pipeline.align_features(aligned, 2)


def test_detect_reports_indices_of_kept_graphs(frozen):
    id_test = synthetic_collection("tree", 4, seed=8)
    ood_test = GraphCollection(
        synthetic_collection("dense", 3, seed=9).graphs + (Graph.from_edges(3, []),)
    )
    _, report = pipeline.detect(frozen, small_config(), id_test, ood_test)
    assert report.graph_ids.tolist() == [0, 1, 2, 3, 4, 5, 6]
    assert report.is_ood.tolist() == [False] * 4 + [True] * 3
    assert report.auc is not None


def test_detect_pads_narrow_features():
    encoder = GraphEncoder(2, 8, 8)
    encoder.freeze()
    id_test = synthetic_collection("tree", 3, seed=10)
    ood_test = synthetic_collection("dense", 3, seed=11)
    tree_encoder, report = pipeline.detect(encoder, small_config(), id_test, ood_test)
    assert tree_encoder.input_dim == 2
    assert len(report.scores) == 6


def test_node_features_without_degree_setting_is_identity():
    collection = synthetic_collection("tree", 3, seed=15)
    assert pipeline.node_features(small_config(), collection) is collection


def test_node_features_one_hot_degrees():
    collection = GraphCollection((two_triangles_bridge(),), [1], "bridge")
    converted = pipeline.node_features(small_config(degree_features=2), collection)
    assert converted.labels.tolist() == [1]
    assert converted.name == "bridge"
    # degrees 2, 2, 3, 3, 2, 2 with the cap at 2
    assert converted[0].features.tolist() == [[0.0, 0.0, 1.0]] * 6


def test_detect_with_degree_features():
    encoder = GraphEncoder(7, 8, 8)
    encoder.freeze()
    id_test = synthetic_collection("tree", 3, seed=10)
    ood_test = synthetic_collection("dense", 3, seed=11)
    config = small_config(degree_features=4)
    tree_encoder, report = pipeline.detect(encoder, config, id_test, ood_test)
    # 5 one-hot columns padded to the encoder width
    assert tree_encoder.input_dim == 7
    assert np.isfinite(report.scores).all()


# splits


def test_split_id():
    collection = synthetic_collection("tree", 20, seed=12, name="ds")
    train, test = pipeline.split_id(collection, seed=0)
    assert (len(train), len(test)) == (18, 2)
    assert train.name == "ds-train"
    assert set(train.graphs).isdisjoint(test.graphs)
    again, _ = pipeline.split_id(collection, seed=0)
    assert again == train


def test_split_id_fraction_range():
    with pytest.raises(ParameterError):
        pipeline.split_id(synthetic_collection("tree", 4, seed=0), seed=0, train_fraction=1.0)


def test_anomaly_split_uses_minority_class():
    graphs = synthetic_collection("tree", 13, seed=13).graphs
    collection = GraphCollection(graphs, [0] * 10 + [1] * 3, "ad")
    train, test = pipeline.anomaly_split(collection, seed=0)
    assert len(train) == 9
    assert train.labels.tolist() == [0] * 9
    assert test.labels.tolist() == [0, 1, 1, 1]
    assert test.graphs[1:] == graphs[10:]


def test_anomaly_split_tie_picks_larger_label():
    graphs = synthetic_collection("tree", 4, seed=14).graphs
    collection = GraphCollection(graphs, [2, 5, 2, 5])
    train, test = pipeline.anomaly_split(collection, seed=0, train_fraction=0.5)
    assert train.labels.tolist() == [2]
    assert test.labels.tolist() == [0, 1, 1]
    assert test.graphs[1:] == (graphs[1], graphs[3])


@pytest.mark.parametrize("labels", [None, [1, 1, 1]])
def test_anomaly_split_needs_two_classes(labels):
    collection = GraphCollection(synthetic_collection("tree", 3, seed=0).graphs, labels)
    with pytest.raises(ParameterError):
        pipeline.anomaly_split(collection, seed=0)


# synthetic end to end

ACCEPTANCE = {
    "degree_features": 16,
    "hidden_dim": 32,
    "lr": 0.01,
    "epochs_pretrain": 50,
    "epochs_testtime": 20,
    "k": 2,
    "lambda": 0.01,
}
SEEDS = range(5)


def synthetic_pair(seed, count=64):
    id_test = synthetic_collection("tree", count, seed=seed, name="trees")
    ood_test = synthetic_collection("dense", count, seed=seed + 1000, density=0.6, name="dense")
    return id_test, ood_test


@functools.lru_cache(maxsize=None)
def pretrained(seed):
    config = load_config(overrides={**ACCEPTANCE, "seed": seed, "batch_size": 16})
    return pipeline.pretrain(config, synthetic_collection("tree", 64, seed=seed + 2000))


@functools.lru_cache(maxsize=None)
def synthetic_report(seed, **overrides):
    config = load_config(
        overrides={**ACCEPTANCE, "seed": seed, "batch_size": 64, **overrides}
    )
    id_test, ood_test = synthetic_pair(seed)
    return pipeline.detect(pretrained(seed), config, id_test, ood_test)[1]


def test_synthetic_pair_shapes():
    id_test, ood_test = synthetic_pair(0)
    assert len(id_test) == len(ood_test) == 64
    for graph in id_test:
        assert 10 <= graph.node_count <= 14
        assert graph.edge_count == graph.node_count - 1
    for graph in ood_test:
        assert 10 <= graph.node_count <= 14
        pairs = graph.node_count * (graph.node_count - 1) / 2
        assert graph.edge_count / pairs >= 0.6


@pytest.mark.slow
def test_synthetic_detection_after_adaptation():
    before = [synthetic_report(seed, epochs_testtime=0).auc for seed in SEEDS]
    after = [synthetic_report(seed).auc for seed in SEEDS]
    assert np.mean(after) >= 0.90
    assert sum(a >= b for a, b in zip(after, before)) >= 4


@pytest.mark.slow
def test_ood_graphs_score_higher():
    higher = 0
    for seed in SEEDS:
        report = synthetic_report(seed)
        higher += report.scores[report.is_ood].mean() > report.scores[~report.is_ood].mean()
    assert higher >= 3


@pytest.mark.slow
def test_full_objective_against_ablations():
    results = {
        objective: np.mean([synthetic_report(seed, objective=objective).auc for seed in SEEDS])
        for objective in OBJECTIVES
    }
    assert results["full"] >= max(results["no_cri"], results["no_contrastive"]) - 0.05
