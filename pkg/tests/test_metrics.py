import csv
import logging

import numpy as np
import pytest

from treeood.exceptions import ParameterError, ShapeError, UndefinedMetricError
from treeood.graph import Graph, GraphCollection
from treeood.losses import ScoreReport
from treeood.metrics import (
    auc,
    bench_tree_construction,
    entropy_range_scores,
    export_density,
    fpr_at_tpr,
    overlap_mass,
    roc_auc_trapezoid,
    score_densities,
    write_bench_csv,
)
from treeood.testing import synthetic_collection


def random_scores(seed, n=50, ties=False):
    rng = np.random.default_rng(seed)
    scores = rng.integers(0, 5, size=n).astype(float) if ties else rng.normal(size=n)
    labels = rng.random(n) < 0.4
    labels[:2] = [True, False]
    return scores, labels


def pair_count_auc(scores, labels):
    ood, ind = scores[labels], scores[~labels]
    wins = sum((o > i) + 0.5 * (o == i) for o in ood for i in ind)
    return wins / (len(ood) * len(ind))


# AUC


def test_auc_perfect_separation():
    assert auc([0.9, 0.8, 0.1, 0.2], [True, True, False, False]) == 1.0


def test_auc_all_ties():
    assert auc([0.3] * 6, [True, False] * 3) == 0.5


def test_auc_inverted():
    assert auc([0.1, 0.2, 0.9], [True, True, False]) == 0.0


@pytest.mark.parametrize("seed", range(5))
@pytest.mark.parametrize("ties", [False, True])
def test_auc_matches_pair_counting(seed, ties):
    scores, labels = random_scores(seed, ties=ties)
    assert auc(scores, labels) == pytest.approx(pair_count_auc(scores, labels), abs=1e-12)


@pytest.mark.parametrize("seed", range(5))
@pytest.mark.parametrize("ties", [False, True])
def test_rank_and_trapezoid_auc_agree(seed, ties):
    scores, labels = random_scores(seed, ties=ties)
    assert roc_auc_trapezoid(scores, labels) == pytest.approx(auc(scores, labels), abs=1e-12)


def test_auc_is_invariant_under_monotone_transforms():
    scores, labels = random_scores(11)
    assert auc(np.exp(scores) * 3 + 1, labels) == pytest.approx(auc(scores, labels), abs=1e-12)


def test_auc_of_negated_scores_is_complement():
    scores, labels = random_scores(12)
    assert auc(scores, labels) + auc(-scores, labels) == pytest.approx(1.0, abs=1e-12)


@pytest.mark.parametrize("labels", [[True, True, True], [False, False, False]])
def test_auc_needs_both_classes(labels):
    with pytest.raises(UndefinedMetricError):
        auc([0.1, 0.2, 0.3], labels)
    with pytest.raises(UndefinedMetricError):
        roc_auc_trapezoid([0.1, 0.2, 0.3], labels)


def test_auc_shape_mismatch():
    with pytest.raises(ShapeError):
        auc([0.1, 0.2], [True])


@pytest.mark.parametrize(("tpr", "expected"), [(1.0, 0.5), (0.95, 0.5), (0.5, 0.25)])
def test_fpr_at_tpr(tpr, expected):
    scores = [0.9, 0.8, 0.7, 0.6, 0.85, 0.1, 0.2, 0.65]
    labels = [True] * 4 + [False] * 4
    assert fpr_at_tpr(scores, labels, tpr) == expected


def test_fpr_at_tpr_range():
    with pytest.raises(ParameterError):
        fpr_at_tpr([0.1, 0.2], [True, False], tpr=0.0)


# densities


def test_separated_scores_do_not_overlap():
    report = ScoreReport([0.0, 0.1, 0.2, 0.9, 1.0], [False, False, False, True, True])
    assert overlap_mass(report, bins=4) == 0.0


def test_identical_distributions_overlap_fully():
    values = np.linspace(0, 1, 40)
    report = ScoreReport(np.r_[values, values], [False] * 40 + [True] * 40)
    assert overlap_mass(report, bins=10) == pytest.approx(1.0)


def test_densities_are_normalized():
    scores, labels = random_scores(3)
    table = score_densities(ScoreReport(scores, labels), bins=7)
    assert len(table.bin_edges) == 8
    assert table.id_density.sum() * table.bin_width == pytest.approx(1.0)
    assert table.ood_density.sum() * table.bin_width == pytest.approx(1.0)


def test_constant_scores_get_a_unit_range():
    table = score_densities(ScoreReport([2.0, 2.0], [True, False]), bins=2)
    assert table.bin_edges.tolist() == [1.5, 2.0, 2.5]


def test_export_density_csv(tmp_path):
    scores, labels = random_scores(4)
    path = tmp_path / "density.csv"
    table = export_density(ScoreReport(scores, labels), 5, path)
    with open(path, newline="") as fp:
        rows = list(csv.reader(fp))
    assert rows[0] == ["bin_left", "id_density", "ood_density"]
    assert len(rows) == 6
    assert float(rows[1][0]) == table.bin_edges[0]
    assert float(rows[3][2]) == table.ood_density[2]


def test_density_needs_two_bins():
    with pytest.raises(ParameterError):
        score_densities(ScoreReport([0.1, 0.2], [True, False]), bins=1)


def test_density_needs_labels():
    with pytest.raises(ParameterError):
        score_densities(ScoreReport([0.1, 0.2]), bins=4)


# benchmark


def test_bench_small_sizes(tmp_path):
    records = bench_tree_construction([20, 40], seed=1, repeats=1)
    assert [r.node_count for r in records] == [20, 40]
    assert [r.edge_count for r in records] == [40, 80]
    assert all(r.wall_time_seconds > 0 for r in records)
    assert all(r.peak_bytes >= 0 for r in records)
    path = tmp_path / "bench.csv"
    write_bench_csv(records, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "node_count,edge_count,wall_time_seconds,peak_bytes"
    assert lines[1].startswith("20,40,")


def test_bench_sizes_must_ascend():
    with pytest.raises(ParameterError):
        bench_tree_construction([40, 20])


@pytest.mark.slow
def test_bench_default_sizes_scale():
    records = bench_tree_construction([1000, 2000, 4000], seed=0)
    assert [r.edge_count for r in records] == [2000, 4000, 8000]


# entropy range baseline


def test_entropy_range_scores_of_training_graphs_are_zero():
    train = synthetic_collection("tree", 6, seed=0)
    scores = entropy_range_scores(train, train, coverage=1.0)
    assert scores.tolist() == [0.0] * 6


def test_entropy_range_scores_edgeless_test_graph(caplog):
    train = synthetic_collection("tree", 4, seed=1)
    test = GraphCollection((Graph.from_edges(3, []),))
    with caplog.at_level(logging.WARNING, logger="treeood.metrics"):
        assert entropy_range_scores(train, test).tolist() == [0.0]
    assert "edgeless" in caplog.text


def test_entropy_range_scores_are_non_negative():
    train = synthetic_collection("tree", 8, seed=2)
    test = synthetic_collection("dense", 5, seed=3)
    assert (entropy_range_scores(train, test) >= 0).all()


def test_entropy_range_scores_coverage():
    train = synthetic_collection("tree", 2, seed=0)
    with pytest.raises(ParameterError):
        entropy_range_scores(train, train, coverage=0.0)
