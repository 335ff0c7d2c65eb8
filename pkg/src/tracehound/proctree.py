"""Process/thread spawn-exit forest built from Fork/Exec/Exit events."""

from __future__ import annotations

import bisect
import json
from dataclasses import dataclass, field
from typing import Iterable, Optional

from .errors import DuplicateLiveTid, ExitWithoutSpawn, ProcTreeError, UnknownNode
from .trace import EventKind, ForkPayload, TraceEvent

NodeKey = tuple[int, int, int]  # (pid, tid, generation)


def format_key(key: NodeKey) -> str:
    return "%d:%d:%d" % key


def parse_key(text: str) -> tuple[int, ...]:
    """Parse ``PID:TID`` or ``PID:TID:GEN``."""
    parts = text.split(":")
    if len(parts) not in (2, 3):
        raise ValueError(f"expected PID:TID[:GEN], got {text!r}")
    return tuple(int(p) for p in parts)


@dataclass
class TaskNode:
    pid: int
    tid: int
    generation: int
    spawn_ts: int
    parent: Optional[NodeKey] = None
    exit_ts: Optional[int] = None
    exit_code: Optional[int] = None
    images: list[tuple[int, str]] = field(default_factory=list)
    children: list[NodeKey] = field(default_factory=list)
    synthesized: bool = False

    @property
    def key(self) -> NodeKey:
        return (self.pid, self.tid, self.generation)

    def live_at(self, ts: int) -> bool:
        return self.spawn_ts <= ts and (self.exit_ts is None or ts < self.exit_ts)

    def to_dict(self) -> dict:
        return {
            "pid": self.pid,
            "tid": self.tid,
            "generation": self.generation,
            "parent": format_key(self.parent) if self.parent else None,
            "spawn_ts": self.spawn_ts,
            "exit_ts": self.exit_ts,
            "exit_code": self.exit_code,
            "images": [[ts, name] for ts, name in self.images],
            "children": [format_key(c) for c in self.children],
            "synthesized": self.synthesized,
        }


@dataclass(frozen=True)
class Lifetime:
    """Half-open ``[start, end)``; ``truncated`` when the task never exited."""

    start: int
    end: int
    truncated: bool

    @property
    def duration(self) -> int:
        return self.end - self.start


class ProcessTree:
    """Forest of task lifetimes keyed by (pid, tid, generation).

    Events must be applied in non-decreasing ts order. The generation
    counter is per tid, so a reused tid gets a fresh node instead of
    clobbering the old lifetime.
    """

    def __init__(self):
        self.roots: list[NodeKey] = []
        self.nodes: dict[NodeKey, TaskNode] = {}
        self.trace_end = 0
        self._live: dict[int, NodeKey] = {}
        self._generations: dict[int, int] = {}
        self._by_tid: dict[int, list[NodeKey]] = {}
        self._first_seen: dict[int, int] = {}
        self._last_ts: Optional[int] = None

    # -- construction -----------------------------------------------------------

    def observe(self, ev: TraceEvent) -> None:
        """Note any event's timestamp; feeds trace_end and synthesized spawn times."""
        if self._last_ts is not None and ev.ts < self._last_ts:
            raise ProcTreeError(f"event at ts={ev.ts} arrives after ts={self._last_ts}")
        self._last_ts = ev.ts
        self.trace_end = max(self.trace_end, ev.ts)
        self._first_seen.setdefault(ev.tid, ev.ts)

    def _new_node(self, pid: int, tid: int, spawn_ts: int, parent: Optional[NodeKey], synthesized=False) -> TaskNode:
        gen = self._generations.get(tid, 0)
        self._generations[tid] = gen + 1
        node = TaskNode(pid, tid, gen, spawn_ts, parent=parent, synthesized=synthesized)
        self.nodes[node.key] = node
        self._live[tid] = node.key
        self._by_tid.setdefault(tid, []).append(node.key)
        if parent is None:
            self.roots.append(node.key)
        else:
            self.nodes[parent].children.append(node.key)
        return node

    def _live_or_synthesize(self, pid: int, tid: int, ts: int) -> TaskNode:
        key = self._live.get(tid)
        if key is not None:
            return self.nodes[key]
        # trace started mid-execution: invent a root from the first sighting
        return self._new_node(pid, tid, self._first_seen.get(tid, ts), None, synthesized=True)

    def apply(self, ev: TraceEvent) -> "ProcessTree":
        if ev.kind not in (EventKind.FORK, EventKind.EXEC, EventKind.EXIT):
            raise ValueError(f"not a lifecycle event: {ev.kind.value}")
        self.observe(ev)
        if ev.kind is EventKind.FORK:
            p: ForkPayload = ev.payload  # type: ignore[assignment]
            if p.child_tid in self._live or p.child_tid == p.parent_tid:
                raise DuplicateLiveTid(p.child_tid, ev.ts)
            parent = self._live_or_synthesize(p.parent_pid, p.parent_tid, ev.ts)
            self._new_node(p.child_pid, p.child_tid, ev.ts, parent.key)
        elif ev.kind is EventKind.EXEC:
            node = self._live_or_synthesize(ev.pid, ev.tid, ev.ts)
            node.images.append((ev.ts, ev.payload.image))  # type: ignore[union-attr]
        else:
            key = self._live.pop(ev.tid, None)
            if key is None:
                raise ExitWithoutSpawn(ev.tid, ev.ts)
            node = self.nodes[key]
            node.exit_ts = ev.ts
            node.exit_code = ev.payload.exit_code  # type: ignore[union-attr]
            self._first_seen.pop(ev.tid, None)
        return self

    # -- queries ----------------------------------------------------------------

    def node(self, key: NodeKey) -> TaskNode:
        try:
            return self.nodes[key]
        except KeyError:
            raise UnknownNode(key) from None

    def resolve(self, ref: tuple[int, ...]) -> NodeKey:
        """Map ``(pid, tid)`` to its first generation, or check ``(pid, tid, gen)``."""
        if len(ref) == 3:
            self.node(ref)  # type: ignore[arg-type]
            return ref  # type: ignore[return-value]
        pid, tid = ref
        for key in self._by_tid.get(tid, ()):
            if key[0] == pid:
                return key
        raise UnknownNode((pid, tid))

    def key_at(self, tid: int, ts: int) -> Optional[NodeKey]:
        """The node holding ``tid`` at instant ``ts``, if any."""
        keys = self._by_tid.get(tid)
        if not keys:
            return None
        # generations of one tid are disjoint and ordered by spawn_ts
        spawns = [self.nodes[k].spawn_ts for k in keys]
        i = bisect.bisect_right(spawns, ts) - 1
        while i >= 0:
            node = self.nodes[keys[i]]
            if node.live_at(ts):
                return node.key
            if node.spawn_ts < ts:
                break
            i -= 1  # zero-length lifetimes can share a spawn_ts
        return None

    def descendants_of(self, root: NodeKey, at: Optional[int] = None) -> set[NodeKey]:
        self.node(root)
        out: set[NodeKey] = set()
        stack = list(self.nodes[root].children)
        while stack:
            key = stack.pop()
            out.add(key)
            stack.extend(self.nodes[key].children)
        if at is not None:
            out = {k for k in out if self.nodes[k].live_at(at)}
        return out

    def lifetime_of(self, key: NodeKey) -> Lifetime:
        node = self.node(key)
        if node.exit_ts is not None:
            return Lifetime(node.spawn_ts, node.exit_ts, False)
        return Lifetime(node.spawn_ts, max(self.trace_end, node.spawn_ts), True)

    def scope(self, root: NodeKey) -> set[NodeKey]:
        """The root plus all its descendants."""
        return self.descendants_of(root) | {root}

    # -- export -----------------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "roots": [format_key(k) for k in self.roots],
            "nodes": {format_key(k): n.to_dict() for k, n in self.nodes.items()},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def build_tree(events: Iterable[TraceEvent]) -> ProcessTree:
    """Apply every lifecycle event of a time-ordered trace; other events only
    advance ``trace_end`` and first-seen times."""
    tree = ProcessTree()
    for ev in events:
        if ev.kind in (EventKind.FORK, EventKind.EXEC, EventKind.EXIT):
            tree.apply(ev)
        else:
            tree.observe(ev)
    return tree


def apply_lifecycle_event(tree: ProcessTree, ev: TraceEvent) -> ProcessTree:
    return tree.apply(ev)


def descendants_of(tree: ProcessTree, root: NodeKey, at: Optional[int] = None) -> set[NodeKey]:
    return tree.descendants_of(root, at)


def lifetime_of(tree: ProcessTree, key: NodeKey) -> Lifetime:
    return tree.lifetime_of(key)
