from __future__ import annotations

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

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
    UserWithChildren,
)
from hflsim.topology import (
    HierarchySpec,
    NodeKind,
    NodeSpec,
    TrustGraph,
    attach_groups,
    build_hierarchy,
    cluster_by_trust,
    remove_subtree,
)

R, S, U = NodeKind.ROOT, NodeKind.GROUP_SERVER, NodeKind.USER


def fig1_like():
    # root 0 -> {1, 2}; 1 -> {11, 12}; 2 -> {13}
    return build_hierarchy([
        NodeSpec(0, R), NodeSpec(1, S, 0), NodeSpec(2, S, 0),
        NodeSpec(11, U, 1), NodeSpec(12, U, 1), NodeSpec(13, U, 2),
    ])


def test_unbalanced_depth_two():
    h = fig1_like()
    assert h.depth() == 2
    assert h.children(0) == (1, 2)
    assert h.users() == [11, 12, 13]
    assert h.leaf_servers() == [1, 2]
    assert h.layer(13) == 2
    assert h.ancestors(12) == [1, 0]


def test_user_directly_under_root_is_flat_fl():
    h = build_hierarchy([NodeSpec(0, R), NodeSpec(1, U, 0)])
    assert h.depth() == 1
    assert h.users() == [1]


def test_branches_of_different_depth():
    h = build_hierarchy([
        NodeSpec(0, R), NodeSpec(1, S, 0), NodeSpec(2, S, 1), NodeSpec(3, U, 2), NodeSpec(4, U, 0),
    ])
    assert h.depth() == 3
    assert h.layer(4) == 1


@pytest.mark.parametrize("specs, err, node", [
    ([NodeSpec(0, R), NodeSpec(1, U, 0), NodeSpec(2, U, 1)], UserWithChildren, 1),
    ([NodeSpec(0, R), NodeSpec(1, R), NodeSpec(2, U, 0), NodeSpec(3, U, 1)], MultipleRoots, 1),
    ([NodeSpec(1, S, 2), NodeSpec(2, U, 1)], MissingRoot, None),
    ([NodeSpec(0, R), NodeSpec(1, S, 0), NodeSpec(2, U, 0)], EmptyGroupServer, 1),
    ([NodeSpec(0, R), NodeSpec(1, U, 9)], DanglingParent, 1),
    ([NodeSpec(0, R), NodeSpec(1, U, 0), NodeSpec(1, U, 0)], DuplicateNode, 1),
    ([NodeSpec(0, R), NodeSpec(5, U, 0), NodeSpec(1, S, 2), NodeSpec(2, S, 1), NodeSpec(3, U, 2)],
     CycleDetected, None),
])
def test_build_errors_name_the_offender(specs, err, node):
    with pytest.raises(err) as info:
        build_hierarchy(specs)
    if node is not None:
        assert info.value.node_id == node


def test_bad_node_values():
    with pytest.raises(ValueError):
        build_hierarchy([NodeSpec(0, R, rounds_before_sync=0), NodeSpec(1, U, 0)])
    with pytest.raises(ValueError):
        build_hierarchy([NodeSpec(0, R, sampling_fraction=0.0), NodeSpec(1, U, 0)])


def test_remove_server_subtree():
    h = remove_subtree(fig1_like(), 2)
    assert sorted(h.nodes) == [0, 1, 11, 12]


def test_remove_sole_child_cascades():
    h = remove_subtree(fig1_like(), 13)
    assert sorted(h.nodes) == [0, 1, 11, 12]


def test_remove_root_and_unknown():
    with pytest.raises(CannotRemoveRoot):
        remove_subtree(fig1_like(), 0)
    with pytest.raises(NodeNotFound):
        remove_subtree(fig1_like(), 77)


def test_remove_last_branch_refused():
    h = build_hierarchy([NodeSpec(0, R), NodeSpec(1, S, 0), NodeSpec(2, U, 1)])
    with pytest.raises(CannotRemoveRoot):
        remove_subtree(h, 2)


def test_cluster_two_cliques():
    edges = {(a, b): 0.9 for a, b in [(1, 2), (2, 3), (1, 3), (4, 5), (5, 6), (4, 6)]}
    edges[(3, 4)] = 0.1
    g = TrustGraph(range(1, 7), edges)
    assert cluster_by_trust(g, 0.5) == [[1, 2, 3], [4, 5, 6]]
    assert cluster_by_trust(g, 0.0) == [[1, 2, 3, 4, 5, 6]]


def test_cluster_no_edges():
    assert cluster_by_trust(TrustGraph([4, 3, 2, 1], {}), 0.5) == [[1], [2], [3], [4]]


def test_trust_graph_validation():
    with pytest.raises(ValueError):
        TrustGraph([1, 2], {(1, 1): 0.5})
    with pytest.raises(ValueError):
        TrustGraph([1, 2], {(1, 2): 1.5})
    with pytest.raises(ValueError):
        TrustGraph([1, 2], [(1, 2, 0.5), (2, 1, 0.6)])


def _leaf_spec(n_servers: int) -> HierarchySpec:
    return HierarchySpec([NodeSpec(0, R)] + [NodeSpec(i, S, 0) for i in range(1, n_servers + 1)])


def test_attach_groups():
    spec = attach_groups(_leaf_spec(2), [[10, 11], [12]])
    h = build_hierarchy(spec)
    assert h.children(1) == (10, 11)
    assert h.children(2) == (12,)


def test_attach_groups_count_mismatch():
    with pytest.raises(GroupCountMismatch):
        attach_groups(_leaf_spec(2), [[10], [11], [12]])


def test_attach_one_group_gives_flat_fl():
    h = build_hierarchy(attach_groups(_leaf_spec(1), [[10, 11, 12]]))
    assert h.leaf_servers() == [1]
    assert h.subtree_users(0) == [10, 11, 12]


# -- properties ---------------------------------------------------------------------------


@st.composite
def random_trees(draw):
    """Random valid hierarchies: servers first (each under an earlier server), then users."""
    n_servers = draw(st.integers(0, 6))
    specs = [NodeSpec(0, R)]
    for s in range(1, n_servers + 1):
        specs.append(NodeSpec(s, S, draw(st.integers(0, s - 1))))
    servers = list(range(n_servers + 1))
    has_child = {p.parent for p in specs if p.parent is not None}
    uid = 100
    for s in servers:
        if s not in has_child:  # every childless server needs at least one user
            specs.append(NodeSpec(uid, U, s))
            uid += 1
    for _ in range(draw(st.integers(0, 8))):
        specs.append(NodeSpec(uid, U, draw(st.sampled_from(servers))))
        uid += 1
    return build_hierarchy(specs)


@settings(max_examples=100, deadline=None)
@given(random_trees())
def test_tree_edge_count(h):
    assert h.edge_count() == len(h) - 1
    for n in h.nodes:
        if n != h.root:
            assert sum(n in h.children(p) for p in h.nodes) == 1


@settings(max_examples=100, deadline=None)
@given(random_trees(), st.data())
def test_remove_subtree_keeps_valid_tree(h, data):
    target = data.draw(st.sampled_from(sorted(h.nodes)))
    try:
        out = remove_subtree(h, target)
    except CannotRemoveRoot:
        return
    assert target not in out
    assert len(out) < len(h)
    assert build_hierarchy(out.to_spec()).nodes == out.nodes
    assert out.edge_count() == len(out) - 1


@st.composite
def trust_graphs(draw):
    n = draw(st.integers(1, 10))
    users = list(range(n))
    pairs = [(a, b) for a in users for b in users if a < b]
    chosen = draw(st.lists(st.sampled_from(pairs), unique=True)) if pairs else []
    weights = draw(st.lists(st.floats(0, 1), min_size=len(chosen), max_size=len(chosen)))
    return TrustGraph(users, dict(zip(chosen, weights)))


@settings(max_examples=150, deadline=None)
@given(trust_graphs(), st.floats(0, 1))
def test_cluster_is_partition(g, t):
    groups = cluster_by_trust(g, t)
    flat = [u for grp in groups for u in grp]
    assert sorted(flat) == list(g.users)
    assert len(flat) == len(set(flat))
    assert [grp[0] for grp in groups] == sorted(grp[0] for grp in groups)


@settings(max_examples=150, deadline=None)
@given(trust_graphs(), st.floats(0, 1), st.floats(0, 1))
def test_cluster_monotone_in_threshold(g, t1, t2):
    lo, hi = min(t1, t2), max(t1, t2)
    coarse = {u: i for i, grp in enumerate(cluster_by_trust(g, lo)) for u in grp}
    # every group at the higher threshold sits inside one group at the lower one
    for grp in cluster_by_trust(g, hi):
        assert len({coarse[u] for u in grp}) == 1
