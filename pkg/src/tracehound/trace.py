"""Trace event schema, the JSONL replay format, and per-CPU stream merging.

Every backend (fixture files, the live collector) produces the same
:class:`TraceEvent` values, so the analysis code never knows where events
came from.
"""

from __future__ import annotations

import heapq
import io
import json
import re
from dataclasses import dataclass
from enum import Enum
from typing import IO, Iterable, Iterator, Sequence, Union

from .errors import MalformedLine, NonMonotoneTimestamp, SchemaViolation

U32_MAX = 2**32 - 1
U64_MAX = 2**64 - 1
I32_MIN, I32_MAX = -(2**31), 2**31 - 1

_HEX_RE = re.compile(r"0[xX][0-9a-fA-F]+\Z")


class EventKind(str, Enum):
    SAMPLE = "sample"
    SWITCH_OUT = "switch_out"
    SWITCH_IN = "switch_in"
    FORK = "fork"
    EXEC = "exec"
    EXIT = "exit"


class WaitKind(str, Enum):
    RUNNABLE = "runnable"
    BLOCKED = "blocked"
    UNKNOWN = "unknown"


LIFECYCLE_KINDS = frozenset({EventKind.FORK, EventKind.EXEC, EventKind.EXIT})


@dataclass(frozen=True)
class SamplePayload:
    stack: tuple[int, ...]  # leaf first
    period: int


@dataclass(frozen=True)
class SchedSwitchPayload:
    direction: str  # "out" | "in"
    wait_kind: WaitKind = WaitKind.UNKNOWN
    stack: tuple[int, ...] | None = None


@dataclass(frozen=True)
class ForkPayload:
    parent_pid: int
    parent_tid: int
    child_pid: int
    child_tid: int


@dataclass(frozen=True)
class ExecPayload:
    image: str


@dataclass(frozen=True)
class ExitPayload:
    exit_code: int


Payload = Union[SamplePayload, SchedSwitchPayload, ForkPayload, ExecPayload, ExitPayload]


@dataclass(frozen=True)
class TraceEvent:
    kind: EventKind
    ts: int
    pid: int
    tid: int
    cpu: int
    payload: Payload

    @classmethod
    def sample(cls, ts, pid, tid, cpu, stack, period) -> "TraceEvent":
        return cls(EventKind.SAMPLE, ts, pid, tid, cpu, SamplePayload(tuple(stack), period))

    @classmethod
    def switch_out(cls, ts, pid, tid, cpu, stack=None, wait=WaitKind.UNKNOWN) -> "TraceEvent":
        stack = tuple(stack) if stack is not None else None
        return cls(EventKind.SWITCH_OUT, ts, pid, tid, cpu, SchedSwitchPayload("out", WaitKind(wait), stack))

    @classmethod
    def switch_in(cls, ts, pid, tid, cpu) -> "TraceEvent":
        return cls(EventKind.SWITCH_IN, ts, pid, tid, cpu, SchedSwitchPayload("in"))

    @classmethod
    def fork(cls, ts, pid, tid, cpu, child_pid, child_tid) -> "TraceEvent":
        return cls(EventKind.FORK, ts, pid, tid, cpu, ForkPayload(pid, tid, child_pid, child_tid))

    @classmethod
    def exec(cls, ts, pid, tid, cpu, image) -> "TraceEvent":
        return cls(EventKind.EXEC, ts, pid, tid, cpu, ExecPayload(image))

    @classmethod
    def exit(cls, ts, pid, tid, cpu, exit_code) -> "TraceEvent":
        return cls(EventKind.EXIT, ts, pid, tid, cpu, ExitPayload(exit_code))


# -- parsing -----------------------------------------------------------------

_COMMON = ("kind", "ts", "pid", "tid", "cpu")
_REQUIRED = {
    EventKind.SAMPLE: ("stack", "period"),
    EventKind.SWITCH_OUT: (),
    EventKind.SWITCH_IN: (),
    EventKind.FORK: ("child_pid", "child_tid"),
    EventKind.EXEC: ("image",),
    EventKind.EXIT: ("exit_code",),
}
_OPTIONAL = {
    EventKind.SWITCH_OUT: ("stack", "wait"),
}


def _int_field(rec: dict, name: str, line_no: int, lo: int, hi: int) -> int:
    v = rec.get(name)
    # bool is an int subclass; JSON true/false must not pass as numbers
    if type(v) is not int:
        raise SchemaViolation(line_no, name, "missing or not an integer" if v is None else "not an integer")
    if not lo <= v <= hi:
        raise SchemaViolation(line_no, name, f"{v} outside [{lo}, {hi}]")
    return v


def _stack_field(rec: dict, line_no: int) -> tuple[int, ...]:
    raw = rec["stack"]
    if not isinstance(raw, list) or not raw:
        raise SchemaViolation(line_no, "stack", "must be a non-empty array of hex strings")
    out = []
    for frame in raw:
        if not isinstance(frame, str) or not _HEX_RE.match(frame):
            raise SchemaViolation(line_no, "stack", f"bad frame address {frame!r}")
        addr = int(frame, 16)
        if addr > U64_MAX:
            raise SchemaViolation(line_no, "stack", f"frame address {frame} exceeds 64 bits")
        out.append(addr)
    return tuple(out)


def event_from_record(rec, line_no: int = 0) -> TraceEvent:
    """Validate one decoded JSON record and build the event."""
    if not isinstance(rec, dict):
        raise SchemaViolation(line_no, "<record>", "line is not a JSON object")
    kind_raw = rec.get("kind")
    try:
        kind = EventKind(kind_raw)
    except ValueError:
        raise SchemaViolation(line_no, "kind", f"unknown kind {kind_raw!r}") from None
    ts = _int_field(rec, "ts", line_no, 0, U64_MAX)
    pid = _int_field(rec, "pid", line_no, 1, U64_MAX)
    tid = _int_field(rec, "tid", line_no, 1, U64_MAX)
    cpu = _int_field(rec, "cpu", line_no, 0, U32_MAX)

    allowed = set(_COMMON) | set(_REQUIRED[kind]) | set(_OPTIONAL.get(kind, ()))
    for name in rec:
        if name not in allowed:
            raise SchemaViolation(line_no, name, f"unknown field for kind {kind.value!r}")

    if kind is EventKind.SAMPLE:
        if "stack" not in rec:
            raise SchemaViolation(line_no, "stack")
        stack = _stack_field(rec, line_no)
        period = _int_field(rec, "period", line_no, 1, U64_MAX)
        payload: Payload = SamplePayload(stack, period)
    elif kind is EventKind.SWITCH_OUT:
        stack = _stack_field(rec, line_no) if "stack" in rec else None
        wait = rec.get("wait", WaitKind.UNKNOWN.value)
        if "wait" in rec and wait not in (WaitKind.RUNNABLE.value, WaitKind.BLOCKED.value):
            raise SchemaViolation(line_no, "wait", f"expected 'runnable' or 'blocked', got {wait!r}")
        payload = SchedSwitchPayload("out", WaitKind(wait), stack)
    elif kind is EventKind.SWITCH_IN:
        payload = SchedSwitchPayload("in")
    elif kind is EventKind.FORK:
        payload = ForkPayload(
            pid,
            tid,
            _int_field(rec, "child_pid", line_no, 1, U64_MAX),
            _int_field(rec, "child_tid", line_no, 1, U64_MAX),
        )
    elif kind is EventKind.EXEC:
        image = rec.get("image")
        if not isinstance(image, str):
            raise SchemaViolation(line_no, "image", "missing or not a string")
        payload = ExecPayload(image)
    else:
        payload = ExitPayload(_int_field(rec, "exit_code", line_no, I32_MIN, I32_MAX))
    return TraceEvent(kind, ts, pid, tid, cpu, payload)


def iter_event_stream(reader: IO[bytes] | Iterable[bytes | str]) -> Iterator[TraceEvent]:
    last_ts: dict[int, int] = {}
    for line_no, raw in enumerate(reader, start=1):
        if isinstance(raw, bytes):
            try:
                line = raw.decode("utf-8")
            except UnicodeDecodeError:
                raise MalformedLine(line_no, "invalid UTF-8") from None
        else:
            line = raw
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except (ValueError, RecursionError):
            raise MalformedLine(line_no) from None
        ev = event_from_record(rec, line_no)
        prev = last_ts.get(ev.cpu)
        if prev is not None and ev.ts < prev:
            raise NonMonotoneTimestamp(line_no, ev.cpu, ev.ts, prev)
        last_ts[ev.cpu] = ev.ts
        yield ev


def parse_event_stream(reader: IO[bytes] | Iterable[bytes | str] | bytes | str) -> list[TraceEvent]:
    """Parse JSONL replay records in file order.

    Blank lines are skipped but still counted for error line numbers.
    Raises :class:`MalformedLine`, :class:`SchemaViolation` or
    :class:`NonMonotoneTimestamp`; never reorders.
    """
    if isinstance(reader, str):
        reader = reader.encode("utf-8")
    if isinstance(reader, bytes):
        reader = io.BytesIO(reader)
    return list(iter_event_stream(reader))


def load_events(path) -> list[TraceEvent]:
    with open(path, "rb") as fh:
        return parse_event_stream(fh)


# -- serialization -------------------------------------------------------------


def _hex(addrs: Sequence[int]) -> list[str]:
    return [f"{a:#x}" for a in addrs]


def event_to_record(ev: TraceEvent) -> dict:
    rec = {"kind": ev.kind.value, "ts": ev.ts, "pid": ev.pid, "tid": ev.tid, "cpu": ev.cpu}
    p = ev.payload
    if isinstance(p, SamplePayload):
        rec["stack"] = _hex(p.stack)
        rec["period"] = p.period
    elif isinstance(p, SchedSwitchPayload):
        if p.direction == "out":
            if p.stack is not None:
                rec["stack"] = _hex(p.stack)
            if p.wait_kind is not WaitKind.UNKNOWN:
                rec["wait"] = p.wait_kind.value
    elif isinstance(p, ForkPayload):
        rec["child_pid"] = p.child_pid
        rec["child_tid"] = p.child_tid
    elif isinstance(p, ExecPayload):
        rec["image"] = p.image
    else:
        rec["exit_code"] = p.exit_code
    return rec


def serialize_event(ev: TraceEvent) -> str:
    return json.dumps(event_to_record(ev), separators=(",", ":"), ensure_ascii=False)


def serialize_events(events: Iterable[TraceEvent]) -> str:
    return "".join(serialize_event(ev) + "\n" for ev in events)


def write_events(events: Iterable[TraceEvent], fh: IO[str]) -> None:
    for ev in events:
        fh.write(serialize_event(ev))
        fh.write("\n")


# -- merging -------------------------------------------------------------------


def _order_key(ev: TraceEvent) -> tuple[int, int]:
    return (ev.ts, ev.cpu)


def merge_streams(streams: Sequence[Sequence[TraceEvent]]) -> list[TraceEvent]:
    """K-way merge of ts-monotone streams into (ts, cpu, input order) order.

    Ties on (ts, cpu) keep concatenation order: earlier stream first, then
    position within the stream.
    """
    # A stream may mix cpus at equal ts; a stable per-stream sort makes each
    # input sorted on the full key without disturbing input order for ties.
    runs = [sorted(s, key=_order_key) for s in streams]
    return list(heapq.merge(*runs, key=_order_key))


def split_by_cpu(events: Iterable[TraceEvent]) -> list[list[TraceEvent]]:
    """Group events into per-cpu streams, keeping relative order."""
    by_cpu: dict[int, list[TraceEvent]] = {}
    for ev in events:
        by_cpu.setdefault(ev.cpu, []).append(ev)
    return [by_cpu[c] for c in sorted(by_cpu)]


# -- validation ----------------------------------------------------------------


@dataclass(frozen=True)
class TraceWarning:
    tid: int
    ts: int

    @property
    def code(self) -> str:
        return type(self).__name__

    def __str__(self) -> str:
        return f"{self.code}(tid={self.tid}, ts={self.ts})"


class UnmatchedSwitchIn(TraceWarning):
    pass


class SampleOutsideLifetime(TraceWarning):
    pass


class DuplicateFork(TraceWarning):
    pass


def validate_trace(events: Iterable[TraceEvent]) -> list[TraceWarning]:
    """Single pass over a time-ordered stream; returns warnings in stream order.

    A tid with no lifecycle history is given the benefit of the doubt, so
    samples only warn after the tid has exited.
    """
    warnings: list[TraceWarning] = []
    switched_out: set[int] = set()
    live: set[int] = set()
    exited: set[int] = set()
    for ev in events:
        k = ev.kind
        if k is EventKind.SWITCH_OUT:
            switched_out.add(ev.tid)
        elif k is EventKind.SWITCH_IN:
            if ev.tid in switched_out:
                switched_out.discard(ev.tid)
            else:
                warnings.append(UnmatchedSwitchIn(ev.tid, ev.ts))
        elif k is EventKind.SAMPLE:
            if ev.tid in exited:
                warnings.append(SampleOutsideLifetime(ev.tid, ev.ts))
        elif k is EventKind.FORK:
            p: ForkPayload = ev.payload  # type: ignore[assignment]
            if p.parent_tid not in exited:
                live.add(p.parent_tid)
            if p.child_tid in live:
                warnings.append(DuplicateFork(p.child_tid, ev.ts))
            live.add(p.child_tid)
            exited.discard(p.child_tid)
        elif k is EventKind.EXEC:
            if ev.tid not in exited:
                live.add(ev.tid)
        elif k is EventKind.EXIT:
            live.discard(ev.tid)
            exited.add(ev.tid)
    return warnings


def trace_end(events: Sequence[TraceEvent]) -> int:
    """Largest timestamp in the trace (0 for an empty trace)."""
    return max((ev.ts for ev in events), default=0)

