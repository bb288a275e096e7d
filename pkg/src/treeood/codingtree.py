"""Structural entropy and greedy construction of fixed-height coding trees.

A coding tree is a rooted tree whose leaves are the nodes of a graph; every
internal node stands for the community of graph nodes below it. Each tree
node carries its volume (sum of degrees below it) and its cut (edges with
exactly one endpoint below it), which is all the structural entropy needs:

    H(G; T) = - sum over non-root v of  cut(v) / vol(V) * log2(vol(v) / vol(parent(v)))

`build_coding_tree` first merges root children greedily into a binary tree
(largest entropy reduction first), then drops internal nodes (smallest entropy
increase first) until the height is at most ``k``.

Handles are integers in creation order: leaves are ``0 .. n-1`` (leaf ``i``
holds graph node ``i``), the root is ``n``, merged nodes follow.
"""

from __future__ import annotations

import collections
import dataclasses
import heapq
import logging
import math
import typing

import numpy as np

from treeood.exceptions import DomainError, ParameterError, StructuralError
from treeood.graph import Graph
from treeood.schemas import CodingTreeSchema

logger = logging.getLogger(__name__)

__all__ = [
    "CodingTree",
    "TreeNode",
    "apply_drop",
    "apply_merge",
    "build_coding_tree",
    "drop_delta",
    "init_flat_tree",
    "merge_delta",
    "structural_entropy",
    "validate_tree",
]


@dataclasses.dataclass
class TreeNode:
    """One node of a `CodingTree`.

    ``children`` is an insertion-ordered dict used as an ordered set, so
    re-parenting stays O(1) on nodes with many children.
    """

    parent: int | None
    children: dict[int, None]
    volume: int
    cut: int
    graph_node: int | None = None

    @property
    def is_leaf(self) -> bool:
        return self.graph_node is not None


class CodingTree:
    """A rooted tree over the nodes of ``graph``.

    Trees are mutated only through `apply_merge` and `apply_drop`; once built
    they are treated as immutable and may be shared freely.
    """

    def __init__(
        self,
        graph: Graph,
        nodes: dict[int, TreeNode],
        root_id: int,
        *,
        next_id: int | None = None,
    ) -> None:
        self.graph = graph
        self.nodes = nodes
        self.root_id = root_id
        self.leaf_of_graph_node: dict[int, int] = {
            node.graph_node: handle
            for handle, node in nodes.items()
            if node.graph_node is not None
        }
        self._next_id = next_id if next_id is not None else max(nodes) + 1
        # cut counts between pairs of root children; rebuilt lazily
        self._root_links: dict[int, dict[int, int]] | None = None

    def __repr__(self) -> str:
        return (
            f"<CodingTree(n={self.graph.node_count}, nodes={len(self.nodes)}, "
            f"height={self.height})>"
        )

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, CodingTree):
            return NotImplemented
        return self.graph == other.graph and self.to_dict() == other.to_dict()

    __hash__ = None  # type: ignore[assignment]

    @property
    def root(self) -> TreeNode:
        return self.nodes[self.root_id]

    def children(self, handle: int) -> list[int]:
        return list(self.nodes[handle].children)

    def parent(self, handle: int) -> int | None:
        return self.nodes[handle].parent

    def depth(self, handle: int) -> int:
        depth = 0
        node = self.nodes[handle]
        while node.parent is not None:
            node = self.nodes[node.parent]
            depth += 1
        return depth

    @property
    def height(self) -> int:
        """Edges on the longest root-to-leaf path."""
        height = 0
        stack = [(self.root_id, 0)]
        while stack:
            handle, depth = stack.pop()
            height = max(height, depth)
            stack.extend((child, depth + 1) for child in self.nodes[handle].children)
        return height

    def subtree_heights(self) -> dict[int, int]:
        """Map every handle to the height of its subtree (leaves are 0)."""
        heights: dict[int, int] = {}
        stack = [(self.root_id, False)]
        while stack:
            handle, expanded = stack.pop()
            children = self.nodes[handle].children
            if expanded or not children:
                heights[handle] = 1 + max((heights[c] for c in children), default=-1)
            else:
                stack.append((handle, True))
                stack.extend((child, False) for child in children)
        return heights

    def internal_nodes(self) -> list[int]:
        """Handles of nodes that are neither the root nor a leaf."""
        return sorted(
            handle
            for handle, node in self.nodes.items()
            if handle != self.root_id and not node.is_leaf
        )

    def leaves_under(self, handle: int) -> list[int]:
        """Graph node ids of the leaves below ``handle``."""
        result = []
        stack = [handle]
        while stack:
            node = self.nodes[stack.pop()]
            if node.is_leaf:
                result.append(typing.cast(int, node.graph_node))
            stack.extend(node.children)
        return sorted(result)

    def communities(self) -> list[list[int]]:
        """Graph nodes grouped by the root child they sit under."""
        return [self.leaves_under(child) for child in self.root.children]

    def copy(self) -> CodingTree:
        nodes = {
            handle: dataclasses.replace(node, children=dict(node.children))
            for handle, node in self.nodes.items()
        }
        return CodingTree(self.graph, nodes, self.root_id, next_id=self._next_id)

    def _new_handle(self) -> int:
        handle = self._next_id
        self._next_id += 1
        return handle

    def root_links(self) -> dict[int, dict[int, int]]:
        """Cut counts between every connected pair of root children."""
        if self._root_links is None:
            top = np.full(self.graph.node_count, -1, dtype=np.int64)
            for child in self.root.children:
                top[self.leaves_under(child)] = child
            links: dict[int, dict[int, int]] = {c: {} for c in self.root.children}
            for u, v in self.graph.edges.tolist():
                a, b = int(top[u]), int(top[v])
                if a != b and a >= 0 and b >= 0:
                    links[a][b] = links[a].get(b, 0) + 1
                    links[b][a] = links[b].get(a, 0) + 1
            self._root_links = links
        return self._root_links

    def cut_between(self, a: int, b: int) -> int:
        """Number of graph edges with one endpoint under ``a`` and the other
        under ``b``."""
        if self.nodes[a].parent == self.root_id and self.nodes[b].parent == self.root_id:
            return self.root_links()[a].get(b, 0)
        edges = self.graph.edges
        under_a = np.isin(edges, self.leaves_under(a))
        under_b = np.isin(edges, self.leaves_under(b))
        crossing = (under_a[:, 0] & under_b[:, 1]) | (under_b[:, 0] & under_a[:, 1])
        return int(crossing.sum())

    def _merge_links(self, a: int, b: int, merged: int) -> None:
        links = self._root_links
        if links is None:
            return
        links_a = links.pop(a, {})
        links_b = links.pop(b, {})
        links_a.pop(b, None)
        links_b.pop(a, None)
        if len(links_a) < len(links_b):
            links_a, links_b = links_b, links_a
        for other, cut in links_b.items():
            links_a[other] = links_a.get(other, 0) + cut
        for other, cut in links_a.items():
            neighbor = links[other]
            neighbor.pop(a, None)
            neighbor.pop(b, None)
            neighbor[merged] = cut
        links[merged] = links_a

    def to_dict(self) -> dict[str, typing.Any]:
        """Serialize as ``{"root": id, "nodes": [...]}``."""
        return CodingTreeSchema().dump(
            {
                "root": self.root_id,
                "nodes": [
                    {
                        "id": handle,
                        "parent": node.parent,
                        "children": list(node.children),
                        "graph_node": node.graph_node,
                        "volume": node.volume,
                        "cut": node.cut,
                    }
                    for handle, node in sorted(self.nodes.items())
                ],
            }
        )

    @classmethod
    def from_dict(cls, data: typing.Mapping[str, typing.Any], graph: Graph) -> CodingTree:
        """Load a serialized tree for ``graph``.

        :raises marshmallow.ValidationError: if the document is malformed.
        """
        loaded = CodingTreeSchema().load(data)
        nodes = {
            record["id"]: TreeNode(
                parent=record["parent"],
                children=dict.fromkeys(record["children"]),
                volume=record["volume"],
                cut=record["cut"],
                graph_node=record["graph_node"],
            )
            for record in loaded["nodes"]
        }
        return cls(graph, nodes, loaded["root"])


def _entropy_term(cut: int, volume: int, parent_volume: int, total: int) -> float:
    if cut == 0 or volume == 0:
        return 0.0
    return -(cut / total) * math.log2(volume / parent_volume)


def _total_volume(graph: Graph) -> int:
    total = graph.volume
    if total == 0:
        raise DomainError("structural entropy is undefined for an edgeless graph")
    return total


def structural_entropy(graph: Graph, tree: CodingTree) -> float:
    """Structural entropy of ``graph`` under ``tree``, in bits.

    :raises DomainError: if the graph has no edges.
    """
    total = _total_volume(graph)
    nodes = tree.nodes
    terms = [
        _entropy_term(node.cut, node.volume, nodes[node.parent].volume, total)
        for node in nodes.values()
        if node.parent is not None
    ]
    return max(math.fsum(terms), 0.0)


def init_flat_tree(graph: Graph) -> CodingTree:
    """A height-1 tree: the root with every graph node as a leaf child."""
    n = graph.node_count
    if n < 1:
        raise ParameterError("cannot build a coding tree over an empty graph")
    degrees = graph.degrees.tolist()
    nodes = {
        v: TreeNode(parent=n, children={}, volume=degrees[v], cut=degrees[v], graph_node=v)
        for v in range(n)
    }
    nodes[n] = TreeNode(
        parent=None, children=dict.fromkeys(range(n)), volume=graph.volume, cut=0
    )
    return CodingTree(graph, nodes, n, next_id=n + 1)


def _check_root_pair(tree: CodingTree, a: int, b: int) -> tuple[TreeNode, TreeNode]:
    if a == b:
        raise StructuralError(f"cannot merge node {a} with itself")
    for handle in (a, b):
        if handle not in tree.nodes or tree.nodes[handle].parent != tree.root_id:
            raise StructuralError(f"node {handle} is not a child of the root")
    return tree.nodes[a], tree.nodes[b]


def _merge_gain(cut: int, merged_volume: int, root_volume: int, total: int) -> float:
    # only the two merged terms and the new node's term change; they collapse
    # to 2 * Cut / vol(V) * log2(vol(root) / vol(v_j))
    if cut == 0 or merged_volume == 0:
        return 0.0
    return 2.0 * cut / total * math.log2(root_volume / merged_volume)


def merge_delta(graph: Graph, tree: CodingTree, a: int, b: int) -> float:
    """Entropy reduction ``H(T) - H(T_ab)`` if root children ``a`` and ``b``
    were merged.

    :raises StructuralError: if ``a`` or ``b`` is not a root child.
    """
    node_a, node_b = _check_root_pair(tree, a, b)
    total = _total_volume(graph)
    cut = tree.cut_between(a, b)
    return _merge_gain(cut, node_a.volume + node_b.volume, tree.root.volume, total)


def apply_merge(tree: CodingTree, a: int, b: int) -> int:
    """Insert a new root child holding ``a`` and ``b``; return its handle."""
    node_a, node_b = _check_root_pair(tree, a, b)
    cut = tree.cut_between(a, b)
    merged = tree._new_handle()
    tree.nodes[merged] = TreeNode(
        parent=tree.root_id,
        children={a: None, b: None},
        volume=node_a.volume + node_b.volume,
        cut=node_a.cut + node_b.cut - 2 * cut,
    )
    root = tree.root
    del root.children[a]
    del root.children[b]
    root.children[merged] = None
    node_a.parent = merged
    node_b.parent = merged
    tree._merge_links(a, b, merged)
    return merged


def _check_droppable(tree: CodingTree, handle: int) -> TreeNode:
    node = tree.nodes.get(handle)
    if node is None:
        raise StructuralError(f"unknown node {handle}")
    if handle == tree.root_id:
        raise StructuralError("the root cannot be dropped")
    if node.is_leaf or not node.children:
        raise StructuralError(f"node {handle} is a leaf")
    return node


def drop_delta(graph: Graph, tree: CodingTree, m: int) -> float:
    """Entropy change ``H(T_m) - H(T)`` if internal node ``m`` were removed
    and its children attached to its parent.

    :raises StructuralError: if ``m`` is the root or a leaf.
    """
    node = _check_droppable(tree, m)
    total = _total_volume(graph)
    parent = tree.nodes[typing.cast(int, node.parent)]
    child_cut = sum(tree.nodes[child].cut for child in node.children)
    return _drop_gain(node, child_cut, parent.volume, total)


def _drop_gain(node: TreeNode, child_cut: int, parent_volume: int, total: int) -> float:
    if node.volume == 0:
        return 0.0
    # the node's own term disappears and every child's denominator moves to the parent
    return (node.cut - child_cut) / total * math.log2(node.volume / parent_volume)


def apply_drop(tree: CodingTree, m: int) -> None:
    """Remove internal node ``m``, re-attaching its children to its parent."""
    node = _check_droppable(tree, m)
    parent_id = typing.cast(int, node.parent)
    parent = tree.nodes[parent_id]
    del parent.children[m]
    for child in node.children:
        tree.nodes[child].parent = parent_id
        parent.children[child] = None
    del tree.nodes[m]
    if parent_id == tree.root_id:
        tree._root_links = None


def _merge_to_binary(graph: Graph, tree: CodingTree) -> None:
    root = tree.root
    total = graph.volume
    root_volume = root.volume
    links = tree.root_links()
    nodes = tree.nodes

    def gain(a: int, b: int, cut: int) -> float:
        return _merge_gain(cut, nodes[a].volume + nodes[b].volume, root_volume, total)

    heap = [
        (-gain(a, b, cut), a, b)
        for a, neighbors in links.items()
        for b, cut in neighbors.items()
        if a < b
    ]
    heapq.heapify(heap)
    while len(root.children) > 2 and heap:
        _, a, b = heapq.heappop(heap)
        # stale: one side was already merged away
        if a not in root.children or b not in root.children:
            continue
        merged = apply_merge(tree, a, b)
        for other, cut in links[merged].items():
            heapq.heappush(heap, (-gain(merged, other, cut), other, merged))

    if len(root.children) > 2:
        # remaining root children share no edges (disconnected graph)
        logger.debug("merging %d disconnected parts", len(root.children))
        spare = list(root.children)
        heapq.heapify(spare)
        while len(root.children) > 2:
            a = heapq.heappop(spare)
            b = heapq.heappop(spare)
            heapq.heappush(spare, apply_merge(tree, a, b))


class _LeafDepths:
    """Leaf depths in a fixed left-to-right order.

    Dropping an internal node lifts every leaf below it by one, and those
    leaves stay contiguous in the order, so a segment tree with range add
    keeps the deepest leaf (the tree height) current in O(log n) per drop.
    """

    def __init__(self, depths: list[int]) -> None:
        size = 1
        while size < len(depths):
            size *= 2
        self._size = size
        self._pending = [0] * (2 * size)
        self._deepest = [-1] * (2 * size)
        self._deepest[size : size + len(depths)] = depths
        for index in range(size - 1, 0, -1):
            self._deepest[index] = max(self._deepest[2 * index], self._deepest[2 * index + 1])

    @property
    def deepest(self) -> int:
        return self._deepest[1]

    def lift(self, start: int, stop: int) -> None:
        """Decrease the depths of leaves ``start .. stop - 1`` by one."""
        self._add(start, stop, -1, 1, 0, self._size)

    def _add(self, start: int, stop: int, value: int, index: int, low: int, high: int) -> None:
        if stop <= low or high <= start:
            return
        if start <= low and high <= stop:
            self._pending[index] += value
            self._deepest[index] += value
            return
        middle = (low + high) // 2
        self._add(start, stop, value, 2 * index, low, middle)
        self._add(start, stop, value, 2 * index + 1, middle, high)
        self._deepest[index] = (
            max(self._deepest[2 * index], self._deepest[2 * index + 1]) + self._pending[index]
        )


def _leaf_spans(tree: CodingTree) -> tuple[list[int], dict[int, tuple[int, int]]]:
    """Leaf depths in depth-first order, and for every internal node the
    half-open range of positions its leaves occupy in that order."""
    depths: list[int] = []
    first: dict[int, int] = {}
    spans: dict[int, tuple[int, int]] = {}
    stack = [(tree.root_id, 0)]
    while stack:
        handle, depth = stack.pop()
        if handle < 0:
            spans[~handle] = (first.pop(~handle), len(depths))
            continue
        node = tree.nodes[handle]
        if node.is_leaf:
            depths.append(depth)
            continue
        first[handle] = len(depths)
        stack.append((~handle, depth))
        stack.extend((child, depth + 1) for child in reversed(node.children))
    return depths, spans


def _compress_to_height(graph: Graph, tree: CodingTree, k: int) -> None:
    depths, spans = _leaf_spans(tree)
    leaf_depths = _LeafDepths(depths)
    if leaf_depths.deepest <= k:
        return
    nodes = tree.nodes
    total = graph.volume
    child_cuts = {
        handle: sum(nodes[child].cut for child in node.children)
        for handle, node in nodes.items()
        if node.children
    }
    version: dict[int, int] = collections.defaultdict(int)

    def entry(handle: int) -> tuple[float, int, int]:
        node = nodes[handle]
        parent_volume = nodes[typing.cast(int, node.parent)].volume
        return (_drop_gain(node, child_cuts[handle], parent_volume, total), handle, version[handle])

    heap = [entry(handle) for handle in tree.internal_nodes()]
    heapq.heapify(heap)
    while leaf_depths.deepest > k:
        _, handle, stamp = heapq.heappop(heap)
        if handle not in nodes or stamp != version[handle]:
            continue
        node = nodes[handle]
        parent_id = typing.cast(int, node.parent)
        children = list(node.children)
        child_cuts[parent_id] += child_cuts.pop(handle) - node.cut
        apply_drop(tree, handle)
        leaf_depths.lift(*spans.pop(handle))

        for touched in [parent_id, *children]:
            if touched != tree.root_id and not nodes[touched].is_leaf:
                version[touched] += 1
                heapq.heappush(heap, entry(touched))


def build_coding_tree(graph: Graph, k: int) -> CodingTree:
    """Greedy coding tree of height at most ``k`` with low structural entropy.

    Step 1 merges the root-child pair with the largest `merge_delta` until the
    root has two children; step 2 drops the internal node with the smallest
    `drop_delta` until the height is at most ``k``. Ties go to the smallest
    handles, so the result is deterministic.

    :raises ParameterError: if ``k < 2``.
    :raises DomainError: if the graph has no edges.
    """
    if k < 2:
        raise ParameterError(f"tree height k must be >= 2, got {k}")
    _total_volume(graph)
    tree = init_flat_tree(graph)
    _merge_to_binary(graph, tree)
    _compress_to_height(graph, tree, k)
    tree._root_links = None
    return tree


def validate_tree(graph: Graph, tree: CodingTree) -> list[str]:
    """Return every violated tree invariant; an empty list means valid."""
    problems: list[str] = []
    nodes = tree.nodes
    if tree.root_id not in nodes:
        return [f"root {tree.root_id} is not a node"]
    if nodes[tree.root_id].parent is not None:
        problems.append("root has a parent")

    for handle, node in nodes.items():
        for child in node.children:
            if child not in nodes:
                problems.append(f"node {handle} lists unknown child {child}")
            elif nodes[child].parent != handle:
                problems.append(f"child {child} of {handle} points to parent {nodes[child].parent}")
        if node.parent is None:
            if handle != tree.root_id:
                problems.append(f"node {handle} has no parent but is not the root")
        elif node.parent not in nodes:
            problems.append(f"node {handle} points to unknown parent {node.parent}")
        elif handle not in nodes[node.parent].children:
            problems.append(f"node {handle} is missing from its parent's children")
        if node.graph_node is not None and node.children:
            problems.append(f"leaf {handle} has children")
        if node.graph_node is None and not node.children and handle != tree.root_id:
            problems.append(f"internal node {handle} has no children")
        if not 0 <= node.cut <= node.volume:
            problems.append(f"node {handle}: cut {node.cut} outside [0, {node.volume}]")

    visited: set[int] = set()
    stack = [tree.root_id]
    acyclic = True
    while stack:
        handle = stack.pop()
        if handle in visited:
            problems.append(f"node {handle} is reachable twice (cycle)")
            acyclic = False
            continue
        visited.add(handle)
        stack.extend(c for c in nodes[handle].children if c in nodes)
    unreachable = sorted(set(nodes) - visited)
    if unreachable:
        problems.append(f"nodes not reachable from the root: {unreachable[:10]}")
        acyclic = False

    leaf_owner: dict[int, int] = {}
    for handle, node in nodes.items():
        if node.graph_node is None:
            continue
        if not 0 <= node.graph_node < graph.node_count:
            problems.append(f"leaf {handle} holds unknown graph node {node.graph_node}")
        elif node.graph_node in leaf_owner:
            problems.append(f"graph node {node.graph_node} has two leaves")
        else:
            leaf_owner[node.graph_node] = handle
    missing = sorted(set(range(graph.node_count)) - set(leaf_owner))
    if missing:
        problems.append(f"graph nodes without a leaf: {missing[:10]}")
    if leaf_owner != tree.leaf_of_graph_node:
        problems.append("leaf_of_graph_node does not match the leaves")

    degrees = graph.degrees.tolist()
    for handle, node in nodes.items():
        if node.graph_node is not None and node.graph_node in leaf_owner:
            if node.volume != degrees[node.graph_node]:
                problems.append(f"leaf {handle}: volume {node.volume} != degree")
            if node.cut != degrees[node.graph_node]:
                problems.append(f"leaf {handle}: cut {node.cut} != degree")
        elif node.children and all(c in nodes for c in node.children):
            expected = sum(nodes[c].volume for c in node.children)
            if node.volume != expected:
                problems.append(f"node {handle}: volume {node.volume} != {expected} (children sum)")

    if nodes[tree.root_id].cut != 0:
        problems.append("root cut is not 0")

    if acyclic and not missing and not problems:
        recount: collections.Counter[int] = collections.Counter()
        ancestors_of: dict[int, set[int]] = {}
        for v, leaf in leaf_owner.items():
            chain = set()
            handle: int | None = leaf
            while handle is not None:
                chain.add(handle)
                handle = nodes[handle].parent
            ancestors_of[v] = chain
        for u, v in graph.edges.tolist():
            recount.update(ancestors_of[u] ^ ancestors_of[v])
        for handle, node in nodes.items():
            if node.cut != recount.get(handle, 0):
                problems.append(
                    f"node {handle}: cut {node.cut} != {recount.get(handle, 0)} (recount)"
                )
    return problems
