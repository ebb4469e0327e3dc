"""Hierarchy construction, validation and mutation.

A hierarchy is a tree with one root, any number of group-server layers and
users at the leaves. Branches may have different depths. All values here are
immutable: mutations return a new :class:`Hierarchy`.
"""

from __future__ import annotations

import enum
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field, replace
from types import MappingProxyType

from hflsim.errors import (
    CannotRemoveRoot,
    CycleDetected,
    DanglingParent,
    DuplicateNode,
    EmptyGroupServer,
    GroupCountMismatch,
    MissingRoot,
    MultipleRoots,
    NodeNotFound,
    TopologyError,
    UserWithChildren,
)


class NodeKind(str, enum.Enum):
    ROOT = "root"
    GROUP_SERVER = "group_server"
    USER = "user"

    @classmethod
    def parse(cls, value: str | NodeKind) -> NodeKind:
        if isinstance(value, NodeKind):
            return value
        aliases = {"root": cls.ROOT, "group_server": cls.GROUP_SERVER, "server": cls.GROUP_SERVER,
                   "groupserver": cls.GROUP_SERVER, "user": cls.USER}
        try:
            return aliases[value.lower()]
        except (KeyError, AttributeError):
            raise ValueError(f"unknown node kind {value!r}") from None


@dataclass(frozen=True)
class NodeSpec:
    """One record of a hierarchy description, as written in a scenario file."""

    id: int
    kind: NodeKind
    parent: int | None = None
    rounds_before_sync: int = 1
    sampling_fraction: float = 1.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", NodeKind.parse(self.kind))


@dataclass(frozen=True)
class HierarchySpec:
    nodes: tuple[NodeSpec, ...]

    def __init__(self, nodes: Iterable[NodeSpec]) -> None:
        object.__setattr__(self, "nodes", tuple(nodes))

    def by_id(self) -> dict[int, NodeSpec]:
        return {n.id: n for n in self.nodes}

    def leaf_server_slots(self) -> list[int]:
        """Group servers that nothing points at yet, ascending by id."""
        has_child = {n.parent for n in self.nodes if n.parent is not None}
        return sorted(n.id for n in self.nodes
                      if n.kind is NodeKind.GROUP_SERVER and n.id not in has_child)


@dataclass(frozen=True)
class Node:
    id: int
    kind: NodeKind
    children: tuple[int, ...]
    rounds_before_sync: int = 1
    sampling_fraction: float = 1.0

    @property
    def is_user(self) -> bool:
        return self.kind is NodeKind.USER


@dataclass(frozen=True)
class Hierarchy:
    """A validated tree. Build it with :func:`build_hierarchy`."""

    nodes: Mapping[int, Node]
    parent: Mapping[int, int]
    root: int = field(default=-1)

    def __contains__(self, node_id: object) -> bool:
        return node_id in self.nodes

    def __len__(self) -> int:
        return len(self.nodes)

    def node(self, node_id: int) -> Node:
        try:
            return self.nodes[node_id]
        except KeyError:
            raise NodeNotFound(node_id, "NodeNotFound") from None

    def children(self, node_id: int) -> tuple[int, ...]:
        return self.node(node_id).children

    def layer(self, node_id: int) -> int:
        """Distance from the root (root is layer 0)."""
        self.node(node_id)
        depth = 0
        while node_id != self.root:
            node_id = self.parent[node_id]
            depth += 1
        return depth

    def ancestors(self, node_id: int) -> list[int]:
        """Parent first, root last."""
        out = []
        while node_id in self.parent:
            node_id = self.parent[node_id]
            out.append(node_id)
        return out

    def depth(self) -> int:
        return max(self.layer(u) for u in self.nodes)

    def users(self) -> list[int]:
        return sorted(i for i, n in self.nodes.items() if n.is_user)

    def servers(self) -> list[int]:
        """Root and group servers, ascending by id."""
        return sorted(i for i, n in self.nodes.items() if not n.is_user)

    def leaf_servers(self) -> list[int]:
        """Servers with at least one user child."""
        return sorted(i for i, n in self.nodes.items()
                      if not n.is_user and any(self.nodes[c].is_user for c in n.children))

    def subtree(self, node_id: int) -> list[int]:
        out, stack = [], [node_id]
        while stack:
            cur = stack.pop()
            out.append(cur)
            stack.extend(self.node(cur).children)
        return sorted(out)

    def subtree_users(self, node_id: int) -> list[int]:
        return [i for i in self.subtree(node_id) if self.nodes[i].is_user]

    def edge_count(self) -> int:
        return sum(len(n.children) for n in self.nodes.values())

    def to_spec(self) -> HierarchySpec:
        return HierarchySpec(
            NodeSpec(n.id, n.kind, self.parent.get(n.id), n.rounds_before_sync, n.sampling_fraction)
            for n in sorted(self.nodes.values(), key=lambda n: n.id)
        )


def _check_node_values(ns: NodeSpec) -> None:
    if isinstance(ns.id, bool) or not isinstance(ns.id, int) or ns.id < 0:
        raise TopologyError(None, f"node ids must be non-negative integers, got {ns.id!r}")
    if isinstance(ns.rounds_before_sync, bool) or not isinstance(ns.rounds_before_sync, int) \
            or ns.rounds_before_sync < 1:
        raise TopologyError(ns.id, "rounds_before_sync must be a positive integer")
    if not 0.0 < float(ns.sampling_fraction) <= 1.0:
        raise TopologyError(ns.id, "sampling_fraction must lie in (0, 1]")


def build_hierarchy(spec: HierarchySpec | Sequence[NodeSpec]) -> Hierarchy:
    """Validate a hierarchy description and return the tree.

    Raises:
        DuplicateNode, MissingRoot, MultipleRoots, DanglingParent,
        CycleDetected, UserWithChildren, EmptyGroupServer: each carrying the
        offending ``node_id``.
    """
    records = spec.nodes if isinstance(spec, HierarchySpec) else tuple(spec)
    by_id: dict[int, NodeSpec] = {}
    for ns in records:
        _check_node_values(ns)
        if ns.id in by_id:
            raise DuplicateNode(ns.id, "DuplicateNode")
        by_id[ns.id] = ns

    roots = sorted(i for i, ns in by_id.items() if ns.kind is NodeKind.ROOT)
    if not roots:
        raise MissingRoot(None, "MissingRoot")
    if len(roots) > 1:
        raise MultipleRoots(roots[1], "MultipleRoots")
    root = roots[0]
    if by_id[root].parent is not None:
        raise TopologyError(root, "root must not have a parent")

    for i in sorted(by_id):
        ns = by_id[i]
        if i == root:
            continue
        if ns.parent is None or ns.parent not in by_id:
            raise DanglingParent(i, "DanglingParent")
        if by_id[ns.parent].kind is NodeKind.USER:
            raise UserWithChildren(ns.parent, "UserWithChildren")

    # every non-root node has a parent in the set; walking up must reach the root
    for i in sorted(by_id):
        seen = {i}
        cur = i
        while cur != root:
            cur = by_id[cur].parent
            if cur in seen:
                raise CycleDetected(cur, "CycleDetected")
            seen.add(cur)

    children: dict[int, list[int]] = {i: [] for i in by_id}
    for i in sorted(by_id):
        if i != root:
            children[by_id[i].parent].append(i)
    for i in sorted(by_id):
        if by_id[i].kind is not NodeKind.USER and not children[i]:
            raise EmptyGroupServer(i, "EmptyGroupServer")

    nodes = {
        i: Node(i, ns.kind, tuple(children[i]), ns.rounds_before_sync, float(ns.sampling_fraction))
        for i, ns in sorted(by_id.items())
    }
    parent = {i: ns.parent for i, ns in sorted(by_id.items()) if i != root}
    h = Hierarchy(MappingProxyType(nodes), MappingProxyType(parent), root)
    # a user-free server subtree is impossible here: empty servers are rejected and
    # every leaf of the tree is therefore a user
    return h


def remove_subtree(h: Hierarchy, node_id: int) -> Hierarchy:
    """Drop ``node_id`` and its descendants.

    A group server left without children is removed as well, repeatedly
    upward. Removal that would strip the root of its last child raises
    :class:`CannotRemoveRoot`, since the root itself is never removed.
    """
    if node_id not in h:
        raise NodeNotFound(node_id, "NodeNotFound")
    if node_id == h.root:
        raise CannotRemoveRoot(node_id, "CannotRemoveRoot")

    doomed = set(h.subtree(node_id))
    top = node_id
    while True:
        par = h.parent[top]
        if any(c not in doomed for c in h.nodes[par].children):
            break
        if par == h.root:
            raise CannotRemoveRoot(h.root, "removal would leave the root without children")
        doomed.add(par)
        top = par
    specs = [ns for ns in h.to_spec().nodes if ns.id not in doomed]
    return build_hierarchy(specs)


# -- trust grouping ---------------------------------------------------------------------


@dataclass(frozen=True)
class TrustGraph:
    users: tuple[int, ...]
    edges: Mapping[tuple[int, int], float]

    def __init__(self, users: Iterable[int], edges: Mapping[tuple[int, int], float] | Iterable) -> None:
        users = tuple(sorted(set(users)))
        items = edges.items() if isinstance(edges, Mapping) else ((e[:2], e[2]) for e in edges)
        canon: dict[tuple[int, int], float] = {}
        for (a, b), w in items:
            if a == b:
                raise ValueError(f"self-edge on user {a}")
            if a not in users or b not in users:
                raise ValueError(f"edge ({a}, {b}) references an unknown user")
            if not 0.0 <= w <= 1.0:
                raise ValueError(f"trust weight {w} outside [0, 1]")
            key = (min(a, b), max(a, b))
            if key in canon and canon[key] != w:
                raise ValueError(f"asymmetric weights on edge {key}")
            canon[key] = float(w)
        object.__setattr__(self, "users", users)
        object.__setattr__(self, "edges", MappingProxyType(canon))

    def weight(self, a: int, b: int) -> float | None:
        return self.edges.get((min(a, b), max(a, b)))


def cluster_by_trust(g: TrustGraph, threshold: float) -> list[list[int]]:
    """Connected components after dropping edges lighter than ``threshold``."""
    parent = {u: u for u in g.users}

    def find(u: int) -> int:
        while parent[u] != u:
            parent[u] = parent[parent[u]]
            u = parent[u]
        return u

    for (a, b), w in g.edges.items():
        if w >= threshold:
            ra, rb = find(a), find(b)
            if ra != rb:
                parent[max(ra, rb)] = min(ra, rb)

    groups: dict[int, list[int]] = {}
    for u in g.users:
        groups.setdefault(find(u), []).append(u)
    return sorted((sorted(m) for m in groups.values()), key=lambda m: m[0])


def attach_groups(h_spec: HierarchySpec, groups: Sequence[Sequence[int]]) -> HierarchySpec:
    """Hang user group k under the k-th childless group server (both by id).

    Users already present in ``h_spec`` are re-parented; missing ones are
    created with default rounds and sampling fraction.
    """
    slots = h_spec.leaf_server_slots()
    if len(slots) != len(groups):
        raise GroupCountMismatch(None, f"{len(groups)} groups for {len(slots)} leaf server slots")
    existing = h_spec.by_id()
    placed: dict[int, int] = {}
    for server, members in zip(slots, sorted((sorted(g) for g in groups), key=lambda m: m[0])):
        for u in members:
            placed[u] = server
    out = []
    for ns in h_spec.nodes:
        if ns.id in placed:
            if ns.kind is not NodeKind.USER:
                raise TopologyError(ns.id, "trust group member is not a user")
            ns = replace(ns, parent=placed[ns.id])
        out.append(ns)
    for u in sorted(placed):
        if u not in existing:
            out.append(NodeSpec(u, NodeKind.USER, placed[u]))
    return HierarchySpec(out)
