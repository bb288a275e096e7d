"""Encoders and gradient plumbing (torch, float64 throughout).

* `GraphEncoder` is the 5-layer GIN ``f``: ``h <- MLP(h + sum of neighbors)``,
  readout = concatenated per-layer mean pools through a projection head.
* `TreeEncoder` is ``f_Theta``: messages flow bottom-up through a coding tree,
  one MLP per tree level, readout = the root vector through a projection head.

Only the tree encoder is ever trained at test time; a frozen graph encoder has
``requires_grad`` switched off on every parameter.
"""

from __future__ import annotations

import dataclasses
import logging
import math
import typing

import numpy as np
import torch
from torch import nn

from treeood.codingtree import CodingTree
from treeood.exceptions import NumericError, ShapeError, StructuralError
from treeood.graph import Graph

logger = logging.getLogger(__name__)

__all__ = [
    "DTYPE",
    "ForwardTrace",
    "GraphEncoder",
    "Mlp",
    "TreeEncoder",
    "as_tensor",
    "gin_forward",
    "loss_gradient",
    "make_optimizer",
    "sgd_step",
    "tree_forward",
]

DTYPE = torch.float64

GIN_LAYERS = 5

Loss = typing.Union[torch.Tensor, typing.Mapping[str, torch.Tensor]]
Closure = typing.Callable[[], Loss]


def as_tensor(values: np.ndarray | torch.Tensor | typing.Sequence) -> torch.Tensor:
    if isinstance(values, torch.Tensor):
        return values.to(DTYPE)
    return torch.from_numpy(np.array(values, dtype=np.float64))


class Mlp(nn.Module):
    """Linear -> ReLU -> Linear."""

    def __init__(
        self,
        in_dim: int,
        hidden_dim: int,
        out_dim: int,
        *,
        generator: torch.Generator | None = None,
    ) -> None:
        super().__init__()
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.layers = nn.Sequential(
            nn.Linear(in_dim, hidden_dim, dtype=DTYPE),
            nn.ReLU(),
            nn.Linear(hidden_dim, out_dim, dtype=DTYPE),
        )
        self.reset_parameters(generator)

    def reset_parameters(self, generator: torch.Generator | None = None) -> None:
        """Glorot-uniform weights, zero biases."""
        with torch.no_grad():
            for layer in self.layers:
                if isinstance(layer, nn.Linear):
                    fan_out, fan_in = layer.weight.shape
                    bound = math.sqrt(6.0 / (fan_in + fan_out))
                    noise = torch.rand(layer.weight.shape, generator=generator, dtype=DTYPE)
                    layer.weight.copy_((2.0 * noise - 1.0) * bound)
                    layer.bias.zero_()

    def zero_(self) -> Mlp:
        with torch.no_grad():
            for parameter in self.parameters():
                parameter.zero_()
        return self

    def identity_(self) -> Mlp:
        """Make the MLP the identity on non-negative inputs."""
        first, _, second = self.layers
        if not first.weight.shape[0] == first.weight.shape[1] == second.weight.shape[0]:
            raise ShapeError("identity initialization needs square layers")
        with torch.no_grad():
            for layer in (first, second):
                layer.weight.copy_(torch.eye(layer.weight.shape[0], dtype=DTYPE))
                layer.bias.zero_()
        return self

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.layers(x)


class _Encoder(nn.Module):
    frozen: bool = False

    def freeze(self) -> None:
        """Switch off gradients for good; the encoder becomes read-only."""
        self.requires_grad_(False)
        self.eval()
        self.frozen = True

    def settings(self) -> dict[str, typing.Any]:
        raise NotImplementedError


class GraphEncoder(_Encoder):
    """The GIN graph encoder.

    :param int input_dim: Node feature width ``d_f``.
    :param int hidden_dim: Width of every GIN layer.
    :param int out_dim: Embedding width after the projection head.
    :param int num_layers: Number of GIN layers.
    :param int seed: Seed of the weight initialization.
    """

    def __init__(
        self,
        input_dim: int,
        hidden_dim: int = 32,
        out_dim: int = 32,
        *,
        num_layers: int = GIN_LAYERS,
        seed: int = 0,
    ) -> None:
        super().__init__()
        self.input_dim = input_dim
        self.hidden_dim = hidden_dim
        self.out_dim = out_dim
        self.num_layers = num_layers
        self.seed = seed
        generator = torch.Generator().manual_seed(seed)
        self.gin_layers = nn.ModuleList(
            Mlp(input_dim if i == 0 else hidden_dim, hidden_dim, hidden_dim, generator=generator)
            for i in range(num_layers)
        )
        self.projection = Mlp(
            num_layers * hidden_dim, hidden_dim, out_dim, generator=generator
        )

    def settings(self) -> dict[str, typing.Any]:
        return {
            "input_dim": self.input_dim,
            "hidden_dim": self.hidden_dim,
            "out_dim": self.out_dim,
            "num_layers": self.num_layers,
            "seed": self.seed,
        }

    def forward(self, graph: Graph, features: typing.Any = None) -> torch.Tensor:
        return gin_forward(self, graph, features)[0]


class TreeEncoder(_Encoder):
    """The bottom-up coding tree encoder with one MLP per tree level.

    :param int k: Tree height; trees must not be taller.
    """

    def __init__(
        self,
        input_dim: int,
        hidden_dim: int = 32,
        out_dim: int = 32,
        *,
        k: int = 2,
        seed: int = 0,
    ) -> None:
        super().__init__()
        self.input_dim = input_dim
        self.hidden_dim = hidden_dim
        self.out_dim = out_dim
        self.k = k
        self.seed = seed
        generator = torch.Generator().manual_seed(seed)
        self.level_mlps = nn.ModuleList(
            Mlp(input_dim if level == 1 else hidden_dim, hidden_dim, hidden_dim, generator=generator)
            for level in range(1, k + 1)
        )
        self.projection = Mlp(hidden_dim, hidden_dim, out_dim, generator=generator)

    def settings(self) -> dict[str, typing.Any]:
        return {
            "input_dim": self.input_dim,
            "hidden_dim": self.hidden_dim,
            "out_dim": self.out_dim,
            "k": self.k,
            "seed": self.seed,
        }

    def forward(self, tree: CodingTree, leaf_features: typing.Any = None) -> torch.Tensor:
        return tree_forward(self, tree, leaf_features)[0]


@dataclasses.dataclass
class ForwardTrace:
    """Intermediate tensors of a forward pass.

    For the graph encoder ``states`` holds one ``(n, hidden)`` matrix per GIN
    layer; for the tree encoder it maps tree handles to their output vectors.
    """

    states: typing.Any
    readout_input: torch.Tensor


def _check_features(features: torch.Tensor, rows: int, width: int) -> None:
    if features.ndim != 2 or features.shape != (rows, width):
        raise ShapeError(
            f"expected features of shape ({rows}, {width}), got {tuple(features.shape)}"
        )


def gin_forward(
    encoder: GraphEncoder, graph: Graph, features: typing.Any = None
) -> tuple[torch.Tensor, ForwardTrace]:
    """Embed ``graph``; ``features`` default to the graph's own node features."""
    x = as_tensor(graph.features if features is None else features)
    _check_features(x, graph.node_count, encoder.input_dim)
    edges = torch.from_numpy(graph.edges.copy())
    source = torch.cat([edges[:, 0], edges[:, 1]])
    target = torch.cat([edges[:, 1], edges[:, 0]])

    states = []
    h = x
    for mlp in encoder.gin_layers:
        neighbors = torch.zeros_like(h).index_add(0, target, h[source])
        h = mlp(h + neighbors)
        states.append(h)
    pooled = torch.cat([state.mean(dim=0) for state in states])
    return encoder.projection(pooled), ForwardTrace(states, pooled)


def tree_forward(
    encoder: TreeEncoder, tree: CodingTree, leaf_features: typing.Any = None
) -> tuple[torch.Tensor, ForwardTrace]:
    """Embed a coding tree bottom-up.

    A node of subtree height ``l`` applies ``MLP^(l)`` to the sum of its
    children's outputs. A child more than one level below its parent is first
    lifted through the intermediate level MLPs; a root lower than ``k`` passes
    through the missing top levels unchanged.

    :raises StructuralError: if the leaves do not cover the feature rows
        one-to-one, or the tree is taller than ``k``.
    """
    x = as_tensor(tree.graph.features if leaf_features is None else leaf_features)
    n = x.shape[0] if x.ndim == 2 else -1
    _check_features(x, n, encoder.input_dim)
    if sorted(tree.leaf_of_graph_node) != list(range(n)):
        raise StructuralError(
            f"tree leaves do not map one-to-one onto {n} feature rows"
        )
    heights = tree.subtree_heights()
    root_height = heights[tree.root_id]
    if root_height > encoder.k:
        raise StructuralError(
            f"tree of height {root_height} exceeds encoder height {encoder.k}"
        )

    outputs: dict[int, torch.Tensor] = {
        handle: x[graph_node] for graph_node, handle in tree.leaf_of_graph_node.items()
    }

    def lifted(handle: int, level: int) -> torch.Tensor:
        vector = outputs[handle]
        for step in range(heights[handle] + 1, level + 1):
            vector = encoder.level_mlps[step - 1](vector)
        return vector

    by_height: dict[int, list[int]] = {}
    for handle, height in heights.items():
        if height:
            by_height.setdefault(height, []).append(handle)
    for height in sorted(by_height):
        handles = by_height[height]
        summed = torch.stack(
            [
                torch.stack([lifted(c, height - 1) for c in tree.nodes[h].children]).sum(dim=0)
                for h in handles
            ]
        )
        for handle, vector in zip(handles, encoder.level_mlps[height - 1](summed)):
            outputs[handle] = vector

    root_vector = outputs[tree.root_id]
    return encoder.projection(root_vector), ForwardTrace(outputs, root_vector)


def loss_gradient(
    module: nn.Module, loss: typing.Union[Loss, Closure]
) -> dict[str, torch.Tensor]:
    """Exact gradients of ``loss`` for every trainable parameter.

    ``loss`` is a scalar tensor or a mapping of named scalar terms that are
    summed, or a closure returning either.

    :raises NumericError: naming the first non-finite term.
    """
    value = loss() if callable(loss) else loss
    terms = dict(value) if isinstance(value, typing.Mapping) else {"loss": value}
    for name, term in terms.items():
        if not torch.isfinite(term).all():
            raise NumericError(f"loss term {name!r} is not finite", term=name)
    total = typing.cast(torch.Tensor, sum(terms.values()))
    named = [(name, p) for name, p in module.named_parameters() if p.requires_grad]
    if not named:
        return {}
    if not isinstance(total, torch.Tensor) or not total.requires_grad:
        return {name: torch.zeros_like(p) for name, p in named}
    grads = torch.autograd.grad(
        total, [p for _, p in named], allow_unused=True
    )
    return {
        name: torch.zeros_like(p) if grad is None else grad
        for (name, p), grad in zip(named, grads)
    }


def make_optimizer(module: nn.Module, lr: float) -> torch.optim.Adam:
    """Adam over the trainable parameters of ``module``."""
    return torch.optim.Adam([p for p in module.parameters() if p.requires_grad], lr=lr)


def sgd_step(
    module: nn.Module,
    gradient: typing.Mapping[str, torch.Tensor],
    optimizer: torch.optim.Optimizer,
) -> None:
    """Apply one bias-corrected Adam update with ``gradient``.

    :raises NumericError: if the gradient or the updated parameters are not finite.
    """
    parameters = dict(module.named_parameters())
    for name, grad in gradient.items():
        if not torch.isfinite(grad).all():
            raise NumericError(f"gradient of {name} is not finite", term=name)
        parameters[name].grad = grad.detach().clone()
    optimizer.step()
    optimizer.zero_grad(set_to_none=True)
    for name in gradient:
        if not torch.isfinite(parameters[name]).all():
            raise NumericError(f"update of {name} is not finite", term=name)
