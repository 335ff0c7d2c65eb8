"""Composition of the trace model, process tree and profiles over one trace."""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from typing import Optional, Sequence

from .proctree import NodeKey, ProcessTree, build_tree, format_key
from .profiles import (
    Accounting,
    Profile,
    aggregate_samples,
    build_offcpu_profile,
    intervals_in_scope,
    pair_context_switches,
    to_folded,
    walltime_accounting,
)
from .symbols import SymbolMap
from .trace import TraceEvent, TraceWarning, merge_streams, split_by_cpu, validate_trace

ARTIFACTS = (
    "on_cpu.folded",
    "off_cpu.folded",
    "tree.json",
    "accounting.json",
    "on_cpu.json",
    "off_cpu.json",
)


@dataclass
class Analysis:
    events: list[TraceEvent]
    tree: ProcessTree
    on_cpu: Profile
    off_cpu: Profile
    accounting: list[Accounting]
    scope: Optional[NodeKey] = None
    trace_warnings: list[TraceWarning] = field(default_factory=list)
    pairing_warnings: Counter = field(default_factory=Counter)

    def accounting_json(self) -> str:
        doc = {
            "scope": format_key(self.scope) if self.scope else None,
            "tasks": [a.to_dict() for a in self.accounting],
            "trace_warnings": [str(w) for w in self.trace_warnings],
            "pairing_warnings": dict(sorted(self.pairing_warnings.items())),
        }
        return json.dumps(doc, indent=2) + "\n"

    def artifacts(self) -> dict[str, str]:
        return {
            "on_cpu.folded": to_folded(self.on_cpu),
            "off_cpu.folded": to_folded(self.off_cpu),
            "tree.json": self.tree.to_json(),
            "accounting.json": self.accounting_json(),
            "on_cpu.json": self.on_cpu.to_json(),
            "off_cpu.json": self.off_cpu.to_json(),
        }


def order_events(streams: Sequence[Sequence[TraceEvent]]) -> list[TraceEvent]:
    """Merge parsed files into one analysis-order stream."""
    per_cpu = [s for stream in streams for s in split_by_cpu(stream)]
    return merge_streams(per_cpu)


def _account(events, tree, symbols, intervals, key, weight) -> Accounting:
    on = aggregate_samples(events, symbols, key, tree, weight)
    off = build_offcpu_profile(intervals_in_scope(intervals, tree, key), symbols, key)
    return walltime_accounting(on, off, tree, key)


def analyze(
    events: list[TraceEvent],
    symbols: SymbolMap,
    scope: Optional[tuple[int, ...]] = None,
    weight: str = "period",
) -> Analysis:
    """Build every replay artifact from a globally ordered event list.

    Without a scope the profiles cover the whole trace and accounting is
    reported per process-tree root.
    """
    tree = build_tree(events)
    key = tree.resolve(scope) if scope is not None else None
    pairing_warnings: Counter = Counter()
    intervals = pair_context_switches(events, pairing_warnings)
    if key is not None:
        on = aggregate_samples(events, symbols, key, tree, weight)
        off = build_offcpu_profile(intervals_in_scope(intervals, tree, key), symbols, key)
        accounting = [walltime_accounting(on, off, tree, key)]
    else:
        on = aggregate_samples(events, symbols, weight=weight)
        off = build_offcpu_profile(intervals, symbols)
        accounting = [_account(events, tree, symbols, intervals, root, weight) for root in tree.roots]
    return Analysis(
        events,
        tree,
        on,
        off,
        accounting,
        scope=key,
        trace_warnings=validate_trace(events),
        pairing_warnings=pairing_warnings,
    )
