"""Rooted key tree layered by hop distance, plus the checker designation.

The tree drives the bottom-up key initiation flow: level(n) is the BFS hop
distance from the root over group members, a node's parent is its lowest-ID
neighbor one level up, and the checker (a one-hop neighbor of the root) sits
outside the tree entirely. All mutators return new trees; treat instances as
immutable snapshots.
"""

from __future__ import annotations

import random
from collections import deque
from dataclasses import dataclass

NodeId = int

# Connectivity graphs are plain symmetric adjacency maps: id -> set of ids.
Graph = dict[NodeId, set[NodeId]]


class TreeError(Exception):
    pass


class IsolatedRoot(TreeError):
    """Root has no one-hop neighbor, so no checker can be chosen."""


class Unreachable(TreeError):
    def __init__(self, nodes: set[NodeId]):
        super().__init__(f"members not reachable from root: {sorted(nodes)}")
        self.nodes = nodes


class UnknownNode(TreeError):
    pass


class Disconnected(TreeError):
    """A joining node has no neighbor inside the tree."""


@dataclass
class KeyTree:
    root: NodeId
    parent: dict[NodeId, NodeId]            # absent for root
    children: dict[NodeId, list[NodeId]]    # ordered by ascending id
    level: dict[NodeId, int]
    height: int
    checker: NodeId

    def members(self) -> set[NodeId]:
        return set(self.level)

    def __contains__(self, node: NodeId) -> bool:
        return node in self.level


@dataclass
class DetachResult:
    tree: KeyTree
    affected: set[NodeId]   # former ancestors of the leaver + re-attached subtree roots
    dropped: set[NodeId]    # members left without any path to the root (reported, out of group)


def select_checker(root: NodeId, graph: Graph, rng: random.Random,
                   members: set[NodeId] | None = None) -> NodeId:
    """Pick a uniformly random one-hop neighbor of the root as checker."""
    candidates = sorted(graph.get(root, set()) - {root})
    if members is not None:
        candidates = [c for c in candidates if c in members]
    if not candidates:
        raise IsolatedRoot(f"root {root} has no eligible one-hop neighbor")
    return candidates[rng.randrange(len(candidates))]


def build_tree(root: NodeId, members: set[NodeId], graph: Graph, checker: NodeId) -> KeyTree:
    """BFS layering of members minus the checker, lowest-ID parent ties."""
    if checker not in members:
        raise TreeError(f"checker {checker} is not a group member")
    if root == checker:
        raise TreeError("root cannot be its own checker")
    body = members - {checker}
    if root not in body:
        raise TreeError(f"root {root} is not a group member")

    level: dict[NodeId, int] = {root: 0}
    parent: dict[NodeId, NodeId] = {}
    children: dict[NodeId, list[NodeId]] = {root: []}
    frontier = deque([root])
    while frontier:
        node = frontier.popleft()
        for nb in sorted(graph.get(node, set())):
            if nb in body and nb not in level:
                level[nb] = level[node] + 1
                parent[nb] = node  # first visit comes from the lowest-ID parent candidate
                children[nb] = []
                children[node].append(nb)
                frontier.append(nb)

    missing = body - set(level)
    if missing:
        raise Unreachable(missing)
    # BFS from sorted adjacency already appends children in ascending id order
    height = max(level.values())
    return KeyTree(root=root, parent=parent, children=children,
                   level=level, height=height, checker=checker)


def key_path(tree: KeyTree, node: NodeId) -> list[NodeId]:
    """Chain of ancestors from `node` up to and including the root."""
    if node not in tree:
        raise UnknownNode(f"node {node} not in tree")
    path = [node]
    while path[-1] != tree.root:
        path.append(tree.parent[path[-1]])
    return path


def attach_member(tree: KeyTree, new_node: NodeId, graph: Graph) -> KeyTree:
    """Place a joiner one level below its shallowest in-tree neighbor.

    This is the local placement rule of the joining flow; existing nodes keep
    their levels (full re-layering happens at the next from-scratch build).
    """
    if new_node in tree or new_node == tree.checker:
        raise TreeError(f"node {new_node} already belongs to the group")
    in_tree = [nb for nb in graph.get(new_node, set()) if nb in tree]
    if not in_tree:
        raise Disconnected(f"joiner {new_node} has no neighbor inside the tree")
    best_level = min(tree.level[nb] for nb in in_tree)
    parent = min(nb for nb in in_tree if tree.level[nb] == best_level)

    level = dict(tree.level)
    parents = dict(tree.parent)
    children = {k: list(v) for k, v in tree.children.items()}
    level[new_node] = best_level + 1
    parents[new_node] = parent
    children[new_node] = []
    children[parent] = sorted(children[parent] + [new_node])
    return KeyTree(root=tree.root, parent=parents, children=children, level=level,
                   height=max(tree.height, best_level + 1), checker=tree.checker)


def detach_member(tree: KeyTree, leaver: NodeId, graph: Graph) -> DetachResult:
    """Remove a member and restore the canonical BFS layering.

    A leaving checker leaves the tree untouched; the root merely has to pick a
    replacement (affected = {root}). Otherwise the reduced membership is
    re-layered from scratch (identical to build_tree on the reduced graph);
    orphaned subtrees that lose every path to the root are reported dropped.
    """
    if leaver == tree.checker:
        return DetachResult(tree=tree, affected={tree.root}, dropped=set())
    if leaver not in tree:
        raise UnknownNode(f"node {leaver} not in tree")
    if leaver == tree.root:
        raise TreeError("root cannot be detached; the group dissolves instead")

    ancestors = key_path(tree, leaver)[1:]
    former_children = list(tree.children[leaver])

    reduced = {n: set(nbs) - {leaver} for n, nbs in graph.items() if n != leaver}
    remaining = (tree.members() | {tree.checker}) - {leaver}
    # Strip unreachable members rather than failing: they fall out of the group.
    try:
        new_tree = build_tree(tree.root, remaining, reduced, tree.checker)
        dropped: set[NodeId] = set()
    except Unreachable as e:
        dropped = e.nodes
        new_tree = build_tree(tree.root, remaining - dropped, reduced, tree.checker)

    affected = set(ancestors) | {c for c in former_children if c in new_tree}
    return DetachResult(tree=new_tree, affected=affected, dropped=dropped)


def dump_tree(tree: KeyTree) -> str:
    """Debug dump: checker header then one `level,id,parent_id` line per node."""
    lines = [f"checker,{tree.checker}"]
    for node in sorted(tree.level, key=lambda n: (tree.level[n], n)):
        p = tree.parent.get(node)
        lines.append(f"{tree.level[node]},{node},{'' if p is None else p}")
    return "\n".join(lines) + "\n"


def bfs_levels(root: NodeId, nodes: set[NodeId], graph: Graph) -> dict[NodeId, int]:
    """Plain BFS hop distances over `nodes`; used as the layering oracle."""
    dist = {root: 0}
    frontier = deque([root])
    while frontier:
        n = frontier.popleft()
        for nb in graph.get(n, set()):
            if nb in nodes and nb not in dist:
                dist[nb] = dist[n] + 1
                frontier.append(nb)
    return dist
