"""Contrastive and conditional-redundancy losses, and the per-graph score.

All losses return `LossTerms`: the batch scalar together with its per-sample
decomposition, whose mean is the scalar. The per-sample decomposition of the
combined objective is the OOD score of each graph; higher means more OOD.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import os
import typing

import numpy as np
import torch

from treeood.config import OBJECTIVES
from treeood.exceptions import BatchSizeError, LoadError, ParameterError, ShapeError
from treeood.nn import as_tensor
from treeood.schemas import ScoreReportSchema

logger = logging.getLogger(__name__)

__all__ = [
    "LossConfig",
    "LossTerms",
    "ScoreReport",
    "combined_objective",
    "cosine_similarity",
    "cri_loss",
    "info_nce",
    "pseudo_labels",
    "similarity_matrix",
    "total_loss",
]


@dataclasses.dataclass(frozen=True)
class LossConfig:
    """:param tau: Temperature of the contrastive term.
    :param lambda_: Weight of the redundancy term.
    :param epsilon: Floor inside logs of empirical means.
    """

    tau: float = 0.2
    lambda_: float = 0.01
    epsilon: float = 1e-12

    def __post_init__(self) -> None:
        if not self.tau > 0:
            raise ParameterError(f"tau must be > 0, got {self.tau}")
        if self.lambda_ < 0:
            raise ParameterError(f"lambda must be >= 0, got {self.lambda_}")
        if not self.epsilon > 0:
            raise ParameterError(f"epsilon must be > 0, got {self.epsilon}")


class LossTerms(typing.NamedTuple):
    value: torch.Tensor
    per_sample: torch.Tensor


@dataclasses.dataclass(frozen=True, eq=False)
class ScoreReport:
    """Per-graph OOD scores with optional ground truth and AUC."""

    scores: np.ndarray
    is_ood: np.ndarray | None = None
    auc: float | None = None
    graph_ids: np.ndarray | None = None

    def __post_init__(self) -> None:
        scores = np.asarray(self.scores, dtype=np.float64)
        object.__setattr__(self, "scores", scores)
        if self.is_ood is not None:
            is_ood = np.asarray(self.is_ood, dtype=bool)
            if is_ood.shape != scores.shape:
                raise ShapeError(f"{len(is_ood)} labels given for {len(scores)} scores")
            object.__setattr__(self, "is_ood", is_ood)
        if self.graph_ids is not None:
            object.__setattr__(self, "graph_ids", np.asarray(self.graph_ids, dtype=np.int64))
        if self.auc is not None and not 0.0 <= self.auc <= 1.0:
            raise ParameterError(f"auc must lie in [0, 1], got {self.auc}")

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ScoreReport):
            return NotImplemented
        return self.to_dict() == other.to_dict()

    __hash__ = None  # type: ignore[assignment]

    def to_dict(self) -> dict[str, typing.Any]:
        return ScoreReportSchema().dump(
            {
                "scores": self.scores.tolist(),
                "labels": None if self.is_ood is None else self.is_ood.tolist(),
                "auc": self.auc,
                "graph_ids": None if self.graph_ids is None else self.graph_ids.tolist(),
            }
        )

    @classmethod
    def from_dict(cls, data: typing.Mapping[str, typing.Any]) -> ScoreReport:
        loaded = ScoreReportSchema().load(data)
        return cls(loaded["scores"], loaded["labels"], loaded["auc"], loaded["graph_ids"])

    def save(self, path: str | os.PathLike[str]) -> None:
        with open(path, "w", encoding="utf-8") as fp:
            json.dump(self.to_dict(), fp)

    @classmethod
    def load(cls, path: str | os.PathLike[str]) -> ScoreReport:
        """:raises LoadError: if the file cannot be read or parsed as JSON."""
        try:
            with open(path, encoding="utf-8") as fp:
                data = json.load(fp)
        except (OSError, json.JSONDecodeError) as error:
            raise LoadError(f"cannot read report {path}: {error}") from error
        return cls.from_dict(data)


def _unit_rows(x: torch.Tensor) -> torch.Tensor:
    norms = x.norm(dim=-1, keepdim=True)
    zero = norms == 0
    if zero.any():
        logger.warning("%d zero embedding(s); their similarities are 0", int(zero.sum()))
    return x / torch.where(zero, torch.ones_like(norms), norms)


def cosine_similarity(a: typing.Any, b: typing.Any) -> torch.Tensor:
    """Cosine similarity of two vectors; 0 if either is the zero vector."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"vectors differ in shape: {tuple(a.shape)} vs {tuple(b.shape)}")
    return (_unit_rows(a) * _unit_rows(b)).sum()


def similarity_matrix(x: typing.Any, y: typing.Any) -> torch.Tensor:
    """``S[i, j] = cos(x_i, y_j)``."""
    x, y = as_tensor(x), as_tensor(y)
    if x.ndim != 2 or y.ndim != 2 or x.shape[1] != y.shape[1]:
        raise ShapeError(f"cannot compare rows of {tuple(x.shape)} and {tuple(y.shape)}")
    return _unit_rows(x) @ _unit_rows(y).T


def _check_pair(z_a: torch.Tensor, z_b: torch.Tensor) -> None:
    if z_a.shape != z_b.shape or z_a.ndim != 2:
        raise ShapeError(
            f"embedding batches must share an (N, d) shape, got "
            f"{tuple(z_a.shape)} and {tuple(z_b.shape)}"
        )


def info_nce(z_alpha: typing.Any, z_beta: typing.Any, tau: float) -> LossTerms:
    """Contrastive loss with positives ``(alpha_i, beta_i)`` and negatives
    ``(alpha_i, alpha_j)``, ``j != i``.

    Per sample: ``-sim(a_i, b_i) / tau + log sum_{j != i} exp(sim(a_i, a_j) / tau)``.

    :raises BatchSizeError: if the batch has fewer than two samples.
    """
    z_alpha, z_beta = as_tensor(z_alpha), as_tensor(z_beta)
    _check_pair(z_alpha, z_beta)
    n = z_alpha.shape[0]
    if n < 2:
        raise BatchSizeError(f"the contrastive loss needs at least 2 samples, got {n}")
    unit_alpha = _unit_rows(z_alpha)
    positive = (unit_alpha * _unit_rows(z_beta)).sum(dim=1) / tau
    negative = (unit_alpha @ unit_alpha.T) / tau
    diagonal = torch.eye(n, dtype=torch.bool)
    negative = negative.masked_fill(diagonal, -math.inf)
    per_sample = torch.logsumexp(negative, dim=1) - positive
    return LossTerms(per_sample.mean(), per_sample)


def pseudo_labels(z_graph: typing.Any) -> torch.Tensor:
    """Index of the largest coordinate of each row, lowest index on ties."""
    z = as_tensor(z_graph)
    if z.ndim != 2:
        raise ShapeError(f"expected an (N, d) matrix, got {tuple(z.shape)}")
    # softmax is monotone, so the argmax of the raw rows is the same
    return torch.argmax(z, dim=1)


def cri_loss(
    z_graph: typing.Any,
    z_tree: typing.Any,
    labels: typing.Any,
    *,
    epsilon: float = 1e-12,
) -> LossTerms:
    """Conditional redundancy term.

    Per sample: ``sim(Z_i, T_i) - log mean_{j in pool(i)} exp(sim(Z_j, T_i))``
    where the pool is every other sample with the same pseudo-label, every
    other sample if the label group is a singleton, and the sample itself in a
    batch of one.

    :raises BatchSizeError: on an empty batch.
    """
    z_graph, z_tree = as_tensor(z_graph), as_tensor(z_tree)
    _check_pair(z_graph, z_tree)
    n = z_graph.shape[0]
    if n < 1:
        raise BatchSizeError("the redundancy loss needs at least 1 sample")
    labels = torch.as_tensor(labels).reshape(-1)
    if labels.shape[0] != n:
        raise ShapeError(f"{labels.shape[0]} labels given for {n} samples")

    # sim[j, i] = cos(Z_j, T_i)
    sim = similarity_matrix(z_graph, z_tree)
    others = ~torch.eye(n, dtype=torch.bool)
    pool = (labels[:, None] == labels[None, :]) & others
    lonely = ~pool.any(dim=0)
    pool[:, lonely] = others[:, lonely]
    if n == 1:
        pool = torch.ones((1, 1), dtype=torch.bool)
    counts = pool.sum(dim=0).to(sim.dtype)
    log_sum = torch.logsumexp(sim.masked_fill(~pool, -math.inf), dim=0)
    log_mean = torch.clamp(log_sum - counts.log(), min=math.log(epsilon))
    per_sample = sim.diagonal() - log_mean
    return LossTerms(per_sample.mean(), per_sample)


def total_loss(l_cl: LossTerms, l_cri: LossTerms, lambda_: float) -> LossTerms:
    """``L = L_Cl + lambda * L_CRI``, sample by sample."""
    if l_cl.per_sample.shape != l_cri.per_sample.shape:
        raise ShapeError("per-sample loss vectors are not aligned")
    return LossTerms(
        l_cl.value + lambda_ * l_cri.value,
        l_cl.per_sample + lambda_ * l_cri.per_sample,
    )


def combined_objective(
    z_graph: torch.Tensor,
    z_tree: torch.Tensor,
    config: LossConfig,
    objective: str = "full",
) -> tuple[LossTerms, dict[str, torch.Tensor]]:
    """The test-time objective over one batch.

    The contrastive term treats the tree embeddings as the anchor view and the
    graph embeddings as positives. ``objective`` selects the full loss or one
    of the ablations ``"no_cri"`` and ``"no_contrastive"``.

    :return: the combined terms and the named scalar parts that were summed.
    """
    if objective not in OBJECTIVES:
        raise ParameterError(f"unknown objective {objective!r}; choose from {OBJECTIVES}")
    n = z_graph.shape[0]
    zeros = LossTerms(torch.zeros((), dtype=z_tree.dtype), torch.zeros(n, dtype=z_tree.dtype))
    if objective == "no_contrastive":
        contrastive = zeros
    else:
        contrastive = info_nce(z_tree, z_graph, config.tau)
    if objective == "no_cri":
        redundancy = zeros
    else:
        redundancy = cri_loss(
            z_graph, z_tree, pseudo_labels(z_graph), epsilon=config.epsilon
        )
    combined = total_loss(contrastive, redundancy, config.lambda_)
    parts = {
        "contrastive": contrastive.value,
        "redundancy": config.lambda_ * redundancy.value,
    }
    return combined, parts
