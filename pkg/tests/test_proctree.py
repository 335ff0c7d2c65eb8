import random

import pytest

from tracehound.errors import DuplicateLiveTid, ExitWithoutSpawn, UnknownNode
from tracehound.proctree import (
    Lifetime,
    ProcessTree,
    apply_lifecycle_event,
    build_tree,
    descendants_of,
    lifetime_of,
    parse_key,
)
from tracehound.trace import EventKind, TraceEvent

import fuzz
import oracles


def test_fork_then_exit_with_unknown_parent():
    tree = ProcessTree()
    apply_lifecycle_event(tree, TraceEvent.fork(0, 1, 1, 0, 2, 2))
    apply_lifecycle_event(tree, TraceEvent.exit(5, 2, 2, 0, 3))
    assert tree.roots == [(1, 1, 0)]
    assert tree.nodes[(1, 1, 0)].synthesized
    child = tree.nodes[(2, 2, 0)]
    assert child.parent == (1, 1, 0)
    assert (child.spawn_ts, child.exit_ts, child.exit_code) == (0, 5, 3)
    assert lifetime_of(tree, (2, 2, 0)) == Lifetime(0, 5, False)


def test_exit_on_empty_tree():
    with pytest.raises(ExitWithoutSpawn) as exc:
        ProcessTree().apply(TraceEvent.exit(3, 9, 9, 0, 0))
    assert exc.value.tid == 9


def test_duplicate_live_tid():
    tree = build_tree([TraceEvent.fork(0, 1, 1, 0, 2, 2)])
    with pytest.raises(DuplicateLiveTid):
        tree.apply(TraceEvent.fork(1, 1, 1, 0, 2, 2))
    with pytest.raises(DuplicateLiveTid):
        tree.apply(TraceEvent.fork(1, 1, 1, 0, 1, 1))


def test_exec_appends_images_without_new_node():
    tree = build_tree([
        TraceEvent.fork(0, 1, 1, 0, 2, 2),
        TraceEvent.exec(1, 2, 2, 0, "/bin/a"),
        TraceEvent.exec(2, 2, 2, 0, "/bin/b"),
    ])
    assert len(tree.nodes) == 2
    assert tree.nodes[(2, 2, 0)].images == [(1, "/bin/a"), (2, "/bin/b")]


def test_tid_reuse_gets_new_generation():
    tree = build_tree([
        TraceEvent.fork(0, 1, 1, 0, 2, 2),
        TraceEvent.exit(4, 2, 2, 0, 0),
        TraceEvent.fork(4, 1, 1, 0, 2, 2),
        TraceEvent.exit(9, 2, 2, 0, 1),
    ])
    assert lifetime_of(tree, (2, 2, 0)) == Lifetime(0, 4, False)
    assert lifetime_of(tree, (2, 2, 1)) == Lifetime(4, 9, False)
    assert tree.key_at(2, 3) == (2, 2, 0)
    assert tree.key_at(2, 4) == (2, 2, 1)
    assert tree.key_at(2, 9) is None


def test_synthesized_spawn_uses_first_sighting():
    tree = build_tree([
        TraceEvent.sample(3, 7, 7, 0, [0x1], 1),
        TraceEvent.fork(10, 7, 7, 0, 8, 8),
    ])
    assert tree.nodes[(7, 7, 0)].spawn_ts == 3


def test_lifetime_truncated_at_trace_end():
    tree = build_tree([
        TraceEvent.fork(2, 1, 1, 0, 2, 2),
        TraceEvent.sample(10, 1, 1, 0, [0x1], 1),
    ])
    assert lifetime_of(tree, (2, 2, 0)) == Lifetime(2, 10, True)
    assert lifetime_of(tree, (2, 2, 0)).duration == 8


def test_unknown_node():
    tree = ProcessTree()
    with pytest.raises(UnknownNode):
        lifetime_of(tree, (1, 1, 0))
    with pytest.raises(UnknownNode):
        descendants_of(tree, (1, 1, 0))


def test_descendants_leaf_and_chain():
    tree = build_tree([
        TraceEvent.fork(0, 1, 1, 0, 2, 2),
        TraceEvent.fork(1, 2, 2, 0, 3, 3),
        TraceEvent.exit(5, 3, 3, 0, 0),
    ])
    a, b, c = (1, 1, 0), (2, 2, 0), (3, 3, 0)
    assert descendants_of(tree, c) == set()
    assert descendants_of(tree, a) == {b, c}
    assert descendants_of(tree, a, at=2) == {b, c}
    assert descendants_of(tree, a, at=5) == {b}


def test_parse_key():
    assert parse_key("10:11") == (10, 11)
    assert parse_key("10:11:2") == (10, 11, 2)
    with pytest.raises(ValueError):
        parse_key("10")


def test_resolve_picks_first_generation():
    tree = build_tree([
        TraceEvent.fork(0, 1, 1, 0, 2, 2),
        TraceEvent.exit(1, 2, 2, 0, 0),
        TraceEvent.fork(2, 1, 1, 0, 2, 2),
    ])
    assert tree.resolve((2, 2)) == (2, 2, 0)
    assert tree.resolve((2, 2, 1)) == (2, 2, 1)
    with pytest.raises(UnknownNode):
        tree.resolve((3, 3))


def test_out_of_order_rejected():
    tree = build_tree([TraceEvent.fork(5, 1, 1, 0, 2, 2)])
    with pytest.raises(Exception):
        tree.apply(TraceEvent.exit(4, 2, 2, 0, 0))


def test_rejects_non_lifecycle_event():
    with pytest.raises(ValueError):
        ProcessTree().apply(TraceEvent.switch_in(0, 1, 1, 0))


@pytest.mark.parametrize("seed", range(20))
def test_tree_matches_bookkeeping_oracle(seed):
    rng = random.Random(seed)
    events = fuzz.lifecycle_stream(rng, 130, n_tids=10)
    tree = build_tree(events)
    canon, last_ts = oracles.lifetimes_oracle(events)
    assert oracles.tree_canon(tree) == canon
    assert tree.trace_end == last_ts


@pytest.mark.parametrize("seed", range(10))
def test_descendants_match_dfs_oracle(seed):
    rng = random.Random(seed)
    events = []
    live = [1]
    ts = 0
    for tid in range(2, 201):
        ts += rng.randint(0, 2)
        parent = rng.choice(live)
        events.append(TraceEvent.fork(ts, parent, parent, 0, tid, tid))
        live.append(tid)
        if rng.random() < 0.3:
            victim = rng.choice(live[1:])
            live.remove(victim)
            events.append(TraceEvent.exit(ts, victim, victim, 0, 0))
    tree = build_tree(events)
    children = {}
    for e in events:
        if e.kind is EventKind.FORK:
            children.setdefault((e.payload.parent_pid, e.payload.parent_tid, 0), []).append(
                (e.payload.child_pid, e.payload.child_tid, 0)
            )
    assert len(tree.nodes) == 200
    for key in rng.sample(sorted(tree.nodes), 25):
        assert tree.descendants_of(key) == oracles.dfs_descendants(children, key)
        at = rng.randint(0, ts)
        live = {k for k in oracles.dfs_descendants(children, key) if tree.nodes[k].live_at(at)}
        assert tree.descendants_of(key, at) == live


@pytest.mark.parametrize("seed", range(20))
def test_lifetimes_consistent_with_per_tid_event_order(seed):
    rng = random.Random(seed)
    events = fuzz.lifecycle_stream(rng, 100, n_tids=6)
    tree = build_tree(events)
    for key in tree.nodes:
        lt = tree.lifetime_of(key)
        assert lt.start <= lt.end <= tree.trace_end or not lt.truncated
        tid = key[1]
        own = [e for e in events if e.tid == tid and e.kind is EventKind.EXIT]
        if not lt.truncated:
            assert any(e.ts == lt.end for e in own)
    per_tid = {}
    for key in tree.nodes:
        per_tid.setdefault(key[1], []).append(tree.lifetime_of(key))
    for lts in per_tid.values():
        lts.sort(key=lambda l: (l.start, l.end))
        for a, b in zip(lts, lts[1:]):
            assert a.end <= b.start


def _acyclic(tree):
    for key in tree.nodes:
        seen = set()
        k = key
        while k is not None:
            assert k not in seen
            seen.add(k)
            k = tree.nodes[k].parent
    return True


@pytest.mark.parametrize("seed", range(20))
def test_forest_structure_invariants(seed):
    rng = random.Random(seed)
    events = fuzz.lifecycle_stream(rng, 150, n_tids=8)
    tree = build_tree(events)
    assert _acyclic(tree)
    forks = sum(e.kind is EventKind.FORK for e in events)
    synthesized = sum(n.synthesized for n in tree.nodes.values())
    assert len(tree.nodes) == forks + synthesized
    for node in tree.nodes.values():
        if node.parent:
            assert tree.nodes[node.parent].spawn_ts <= node.spawn_ts
            assert node.key in tree.nodes[node.parent].children
        else:
            assert node.key in tree.roots


def _shuffle_equal_ts(rng, events):
    out = []
    i = 0
    while i < len(events):
        j = i
        while j < len(events) and events[j].ts == events[i].ts:
            j += 1
        group = events[i:j]
        rng.shuffle(group)
        out.extend(group)
        i = j
    return out


def _iso_canon(tree):
    return {
        (n.tid, n.generation, n.pid, n.spawn_ts, n.exit_ts, n.exit_code, n.parent, tuple(n.images), frozenset(n.children))
        for n in tree.nodes.values()
    }


@pytest.mark.parametrize("seed", range(20))
def test_equal_ts_permutation_gives_isomorphic_forest(seed):
    # every event gets its own tids within a timestamp group, so reordering the
    # group cannot change which events are valid
    rng = random.Random(seed)
    events = []
    ts = 0
    next_tid = 2
    live = [1]
    for _ in range(40):
        ts += 1
        parents = rng.sample(live, min(len(live), 3))
        for p in parents:
            events.append(TraceEvent.fork(ts, p, p, 0, next_tid, next_tid))
            live.append(next_tid)
            next_tid += 1
    tree_a = build_tree(events)
    tree_b = build_tree(_shuffle_equal_ts(rng, events))
    assert _iso_canon(tree_a) == _iso_canon(tree_b)
    assert set(tree_a.roots) == set(tree_b.roots)


def test_json_export_schema():
    tree = build_tree([TraceEvent.fork(0, 1, 1, 0, 2, 2), TraceEvent.exit(5, 2, 2, 0, 0)])
    doc = tree.to_dict()
    assert doc["roots"] == ["1:1:0"]
    assert set(doc["nodes"]) == {"1:1:0", "2:2:0"}
    assert doc["nodes"]["2:2:0"]["parent"] == "1:1:0"
    assert doc["nodes"]["1:1:0"]["children"] == ["2:2:0"]
    text = tree.to_json()
    assert text.index('"nodes"') < text.index('"roots"')
