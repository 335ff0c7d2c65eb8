"""On-CPU and off-CPU profiles, folded-stack export and walltime accounting."""

from __future__ import annotations

import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

from .errors import FoldedParseError
from .proctree import NodeKey, ProcessTree
from .symbols import SymbolMap, symbolize
from .trace import EventKind, SamplePayload, SchedSwitchPayload, TraceEvent, WaitKind

log = logging.getLogger(__name__)

ON_CPU = "on_cpu"
OFF_CPU = "off_cpu"
NO_STACK = "[no stack]"

# |negative unattributed| up to this fraction of lifetime is sampling slack
ACCOUNTING_TOLERANCE = 0.01

Stack = tuple[str, ...]


@dataclass
class Profile:
    kind: str
    entries: dict[Stack, int] = field(default_factory=dict)
    scope: Optional[NodeKey] = None
    warnings: Counter = field(default_factory=Counter)

    def add(self, stack: Stack, weight: int) -> None:
        self.entries[stack] = self.entries.get(stack, 0) + weight

    @property
    def total(self) -> int:
        return sum(self.entries.values())

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "entries": [
                {"stack": list(stack), "weight_ns": w}
                for stack, w in sorted(self.entries.items(), key=lambda kv: ";".join(kv[0]))
            ],
            "warnings": dict(sorted(self.warnings.items())),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"


@dataclass(frozen=True)
class OffCpuInterval:
    pid: int
    tid: int
    start_ts: int
    end_ts: int
    stack: Optional[tuple[int, ...]]
    wait_kind: WaitKind
    truncated: bool = False

    @property
    def duration(self) -> int:
        return self.end_ts - self.start_ts


def root_first(stack: Sequence[int], symbols: SymbolMap) -> Stack:
    return tuple(symbolize(a, symbols) for a in reversed(stack))


def _scope_filter(tree: Optional[ProcessTree], scope: Optional[NodeKey]):
    if scope is None:
        return None
    if tree is None:
        raise ValueError("a scoped profile needs the process tree")
    return tree.scope(scope)


def aggregate_samples(
    events: Iterable[TraceEvent],
    symbols: SymbolMap,
    scope: Optional[NodeKey] = None,
    tree: Optional[ProcessTree] = None,
    weight: str = "period",
) -> Profile:
    """Sum sample weights per root-first symbolized stack.

    With ``scope``, only samples whose tid belongs to the scope root or one
    of its descendants at the sample's instant are counted. ``weight`` is
    ``"period"`` (ns) or ``"count"`` (1 per sample).
    """
    if weight not in ("period", "count"):
        raise ValueError(f"unknown weight mode {weight!r}")
    keys = _scope_filter(tree, scope)
    prof = Profile(ON_CPU, scope=scope)
    for ev in events:
        if ev.kind is not EventKind.SAMPLE:
            continue
        p: SamplePayload = ev.payload  # type: ignore[assignment]
        if keys is not None:
            key = tree.key_at(ev.tid, ev.ts)  # type: ignore[union-attr]
            if key is None:
                prof.warnings["sample_outside_lifetime"] += 1
                continue
            if key not in keys:
                continue
        prof.add(root_first(p.stack, symbols), p.period if weight == "period" else 1)
    return prof


def pair_context_switches(events: Sequence[TraceEvent], warnings: Optional[Counter] = None) -> list[OffCpuInterval]:
    """Pair each tid's switch-out with its next switch-in.

    Intervals still open at the end are closed at the last event's ts and
    marked truncated. A switch-in with nothing open and a second switch-out
    while one is already open are dropped and counted in ``warnings``, as
    are zero-length intervals.
    """
    if warnings is None:
        warnings = Counter()
    open_: dict[int, tuple[int, TraceEvent]] = {}
    done: list[tuple[int, OffCpuInterval]] = []

    def close(order: int, out: TraceEvent, end: int, truncated: bool) -> None:
        if end <= out.ts:
            warnings["zero_length_interval"] += 1
            return
        p: SchedSwitchPayload = out.payload  # type: ignore[assignment]
        done.append((order, OffCpuInterval(out.pid, out.tid, out.ts, end, p.stack, p.wait_kind, truncated)))

    last_ts = 0
    for i, ev in enumerate(events):
        last_ts = ev.ts
        if ev.kind is EventKind.SWITCH_OUT:
            if ev.tid in open_:
                warnings["switch_out_while_off_cpu"] += 1
            else:
                open_[ev.tid] = (i, ev)
        elif ev.kind is EventKind.SWITCH_IN:
            opened = open_.pop(ev.tid, None)
            if opened is None:
                warnings["unmatched_switch_in"] += 1
            else:
                close(opened[0], opened[1], ev.ts, False)
    for order, out in open_.values():
        close(order, out, last_ts, True)
    done.sort(key=lambda pair: pair[0])
    return [iv for _, iv in done]


def intervals_in_scope(intervals: Iterable[OffCpuInterval], tree: ProcessTree, scope: NodeKey) -> list[OffCpuInterval]:
    keys = tree.scope(scope)
    return [iv for iv in intervals if tree.key_at(iv.tid, iv.start_ts) in keys]


def build_offcpu_profile(intervals: Iterable[OffCpuInterval], symbols: SymbolMap, scope: Optional[NodeKey] = None) -> Profile:
    prof = Profile(OFF_CPU, scope=scope)
    for iv in intervals:
        stack = root_first(iv.stack, symbols) if iv.stack else (NO_STACK,)
        prof.add(stack, iv.duration)
    return prof


# -- folded stacks ---------------------------------------------------------------


def to_folded(profile: Profile) -> str:
    rows = sorted((";".join(stack), w) for stack, w in profile.entries.items())
    return "".join(f"{joined} {w}\n" for joined, w in rows)


def parse_folded(text: str, kind: str = ON_CPU) -> Profile:
    prof = Profile(kind)
    for line_no, line in enumerate(text.split("\n"), start=1):
        line = line.removesuffix("\r")
        if not line:
            continue
        stack, sep, weight = line.rpartition(" ")
        if not sep or not stack or not (weight.isascii() and weight.isdigit()):
            raise FoldedParseError(f"folded line {line_no}: expected 'frame;frame WEIGHT'")
        prof.add(tuple(stack.split(";")), int(weight))
    return prof


# -- accounting -------------------------------------------------------------------


@dataclass(frozen=True)
class Accounting:
    key: NodeKey
    on_ns: int
    off_ns: int
    lifetime_ns: int
    unattributed_ns: int
    excess_ns: int = 0
    truncated: bool = False
    warning: Optional[str] = None

    def to_dict(self) -> dict:
        return {
            "key": "%d:%d:%d" % self.key,
            "on_ns": self.on_ns,
            "off_ns": self.off_ns,
            "lifetime_ns": self.lifetime_ns,
            "unattributed_ns": self.unattributed_ns,
            "excess_ns": self.excess_ns,
            "truncated": self.truncated,
            "warning": self.warning,
        }


def walltime_accounting(on: Profile, off: Profile, tree: ProcessTree, key: NodeKey) -> Accounting:
    """Split a task's lifetime into on-CPU, off-CPU and unattributed time.

    The lifetime of a scope is the summed lifetimes of the root and every
    descendant task, since each thread contributes its own timeline. A
    negative remainder is clamped to 0; it is reported as a warning only
    when it exceeds ``ACCOUNTING_TOLERANCE`` of the lifetime.
    """
    scope = tree.scope(key)
    lifetimes = [tree.lifetime_of(k) for k in sorted(scope)]
    lifetime = sum(lt.duration for lt in lifetimes)
    on_ns, off_ns = on.total, off.total
    rest = lifetime - on_ns - off_ns
    warning = None
    if rest < 0 and -rest > ACCOUNTING_TOLERANCE * lifetime:
        warning = f"on+off exceeds lifetime by {-rest} ns"
        log.warning("task %s: %s", key, warning)
    return Accounting(
        key,
        on_ns,
        off_ns,
        lifetime,
        max(rest, 0),
        excess_ns=max(-rest, 0),
        truncated=any(lt.truncated for lt in lifetimes),
        warning=warning,
    )
