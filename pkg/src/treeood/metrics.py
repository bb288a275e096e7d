"""OOD metrics, score-density export and the tree construction benchmark."""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
import os
import statistics
import time
import typing

import numpy as np
from scipy import stats

from treeood.codingtree import build_coding_tree, structural_entropy
from treeood.exceptions import ParameterError, ShapeError, UndefinedMetricError
from treeood.graph import GraphCollection, generate_er_graph
from treeood.losses import ScoreReport

try:
    import resource
except ImportError:  # pragma: no cover
    resource = None  # type: ignore[assignment]

logger = logging.getLogger(__name__)

__all__ = [
    "BenchRecord",
    "DensityTable",
    "auc",
    "bench_tree_construction",
    "entropy_range_scores",
    "export_density",
    "fpr_at_tpr",
    "overlap_mass",
    "roc_auc_trapezoid",
    "score_densities",
    "write_bench_csv",
]


def _split_scores(
    scores: typing.Any, is_ood: typing.Any
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(is_ood, dtype=bool).ravel()
    if scores.shape != labels.shape:
        raise ShapeError(f"{len(labels)} labels given for {len(scores)} scores")
    if labels.all() or not labels.any():
        raise UndefinedMetricError("AUC needs at least one OOD and one ID sample")
    return scores, labels, scores[labels]


def auc(scores: typing.Any, is_ood: typing.Any) -> float:
    """Mann-Whitney AUC; ties earn half credit.

    :raises UndefinedMetricError: if only one class is present.
    """
    scores, labels, _ = _split_scores(scores, is_ood)
    positives = int(labels.sum())
    negatives = len(labels) - positives
    ranks = stats.rankdata(scores)
    u = ranks[labels].sum() - positives * (positives + 1) / 2.0
    return float(u / (positives * negatives))


def _roc_points(scores: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    order = np.argsort(-scores, kind="mergesort")
    scores, labels = scores[order], labels[order]
    # one ROC point per distinct threshold
    last = np.r_[np.flatnonzero(np.diff(scores)), len(scores) - 1]
    tp = np.cumsum(labels)[last]
    fp = np.cumsum(~labels)[last]
    tpr = np.r_[0.0, tp / labels.sum()]
    fpr = np.r_[0.0, fp / (~labels).sum()]
    return fpr, tpr, scores[last]


def roc_auc_trapezoid(scores: typing.Any, is_ood: typing.Any) -> float:
    """AUC by trapezoidal integration of the ROC curve."""
    scores, labels, _ = _split_scores(scores, is_ood)
    fpr, tpr, _ = _roc_points(scores, labels)
    return float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))


def fpr_at_tpr(scores: typing.Any, is_ood: typing.Any, tpr: float = 0.95) -> float:
    """False positive rate at the highest threshold reaching ``tpr`` recall
    of OOD samples."""
    if not 0.0 < tpr <= 1.0:
        raise ParameterError(f"tpr must lie in (0, 1], got {tpr}")
    scores, labels, ood = _split_scores(scores, is_ood)
    needed = math.ceil(tpr * len(ood) - 1e-9)
    threshold = np.sort(ood)[::-1][needed - 1]
    return float(np.mean(scores[~labels] >= threshold))


@dataclasses.dataclass(frozen=True)
class DensityTable:
    bin_edges: np.ndarray
    id_density: np.ndarray
    ood_density: np.ndarray

    @property
    def bin_width(self) -> float:
        return float(self.bin_edges[1] - self.bin_edges[0])

    def overlap(self) -> float:
        return float(np.minimum(self.id_density, self.ood_density).sum() * self.bin_width)


def score_densities(report: ScoreReport, bins: int) -> DensityTable:
    """Normalized ID and OOD score histograms over a shared range."""
    if bins < 2:
        raise ParameterError(f"bins must be >= 2, got {bins}")
    if report.is_ood is None:
        raise ParameterError("density export needs a report with labels")
    scores, labels = report.scores, report.is_ood
    low, high = float(scores.min()), float(scores.max())
    if low == high:
        low, high = low - 0.5, high + 0.5
    edges = np.linspace(low, high, bins + 1)

    def density(values: np.ndarray) -> np.ndarray:
        if not len(values):
            return np.zeros(bins)
        return np.histogram(values, bins=edges, density=True)[0]

    return DensityTable(edges, density(scores[~labels]), density(scores[labels]))


def overlap_mass(report: ScoreReport, bins: int = 20) -> float:
    """Shared probability mass of the ID and OOD score histograms."""
    return score_densities(report, bins).overlap()


def export_density(
    report: ScoreReport, bins: int, path: str | os.PathLike[str]
) -> DensityTable:
    """Write ``bin_left,id_density,ood_density`` rows to ``path``."""
    table = score_densities(report, bins)
    with open(path, "w", newline="", encoding="utf-8") as fp:
        writer = csv.writer(fp)
        writer.writerow(["bin_left", "id_density", "ood_density"])
        for row in zip(table.bin_edges[:-1], table.id_density, table.ood_density):
            writer.writerow([repr(float(value)) for value in row])
    return table


@dataclasses.dataclass(frozen=True)
class BenchRecord:
    node_count: int
    edge_count: int
    wall_time_seconds: float
    peak_bytes: int


def _peak_bytes() -> int:
    if resource is None:
        return 0
    # ru_maxrss is in KiB on Linux
    return int(resource.getrusage(resource.RUSAGE_SELF).ru_maxrss) * 1024


def bench_tree_construction(
    sizes: typing.Sequence[int], seed: int = 0, *, k: int = 2, repeats: int = 3
) -> list[BenchRecord]:
    """Time `build_coding_tree` on Erdős–Rényi graphs with ``|E| = 2|V|``.

    Each size reports the median of ``repeats`` runs.
    """
    if list(sizes) != sorted(sizes):
        raise ParameterError("benchmark sizes must be ascending")
    if repeats < 1:
        raise ParameterError(f"repeats must be >= 1, got {repeats}")
    records = []
    for n in sizes:
        graph = generate_er_graph(n, seed)
        timings = []
        for _ in range(repeats):
            start = time.perf_counter()
            build_coding_tree(graph, k)
            timings.append(time.perf_counter() - start)
        record = BenchRecord(n, graph.edge_count, statistics.median(timings), _peak_bytes())
        logger.info("n=%d m=%d: %.3fs", n, record.edge_count, record.wall_time_seconds)
        records.append(record)
    return records


def write_bench_csv(records: typing.Iterable[BenchRecord], path: str | os.PathLike[str]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fp:
        writer = csv.writer(fp)
        writer.writerow([field.name for field in dataclasses.fields(BenchRecord)])
        for record in records:
            writer.writerow(dataclasses.astuple(record))


def _entropies(graphs: typing.Iterable, k: int) -> list[float | None]:
    result: list[float | None] = []
    for graph in graphs:
        if graph.edge_count == 0:
            result.append(None)
            continue
        result.append(structural_entropy(graph, build_coding_tree(graph, k)))
    return result


def entropy_range_scores(
    id_train: GraphCollection,
    test: GraphCollection,
    *,
    k: int = 2,
    coverage: float = 0.95,
) -> np.ndarray:
    """Score test graphs by how far their structural entropy falls outside
    the central ``coverage`` range of the training entropies.

    A baseline without any learning; edgeless test graphs score 0.
    """
    if not 0.0 < coverage <= 1.0:
        raise ParameterError(f"coverage must lie in (0, 1], got {coverage}")
    reference = np.array([h for h in _entropies(id_train, k) if h is not None])
    if not len(reference):
        raise ParameterError("no training graph has edges")
    tail = (1.0 - coverage) / 2.0
    low, high = np.quantile(reference, [tail, 1.0 - tail])
    scores = []
    skipped = 0
    for entropy in _entropies(test, k):
        if entropy is None:
            skipped += 1
            scores.append(0.0)
        else:
            scores.append(max(low - entropy, entropy - high, 0.0))
    if skipped:
        logger.warning("%d edgeless test graph(s) scored 0", skipped)
    return np.asarray(scores)
