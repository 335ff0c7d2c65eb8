"""Live backend: trace a spawned command with bpftrace and emit replay JSONL.

The in-kernel side is an opaque adapter. This module only builds the
bpftrace program text, holds the child until probes are attached, and
turns the adapter's line protocol into :class:`TraceEvent` values. All
analysis happens downstream on the resulting file, exactly as for
fixtures.

Adapter line protocol (one ``printf`` per probe hit)::

    TH READY
    TH F <ts> <pid> <tid> <cpu> <child_tid>
    TH E <ts> <pid> <tid> <cpu> <image...>
    TH X <ts> <pid> <tid> <cpu> <thread_code> <group_code> <group_set>
    TH I <ts> <tid> <cpu>
    TH O <ts> <pid> <tid> <cpu> <prev_state>     followed by stack lines, then TH END
    TH S <ts> <pid> <tid> <cpu>                  followed by stack lines, then TH END
"""

from __future__ import annotations

import logging
import os
import shutil
import signal
import subprocess
import sys
import tempfile
import threading
import time
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import IO, Iterable, Optional, Union

from .errors import AttachFailure, CapabilityDenied, ChildSpawnFailure
from .trace import TraceEvent, WaitKind, merge_streams, parse_event_stream, serialize_events, split_by_cpu

log = logging.getLogger(__name__)

FORCE_NO_LIVE_ENV = "TRACEHOUND_FORCE_NO_LIVE"
TRACEFS_DIRS = ("/sys/kernel/tracing", "/sys/kernel/debug/tracing")

CAP_SYS_ADMIN = 21
CAP_PERFMON = 38
CAP_BPF = 39

ATTACH_TIMEOUT_S = 30.0


class AttachMode(str, Enum):
    UPROBES = "uprobes"
    USDT = "usdt"
    TRACEPOINTS = "tracepoints"


@dataclass(frozen=True)
class CapabilityReport:
    tracing_available: bool
    reasons: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {"tracing_available": self.tracing_available, "reasons": list(self.reasons)}


def _effective_caps() -> int:
    try:
        with open("/proc/self/status") as fh:
            for line in fh:
                if line.startswith("CapEff:"):
                    return int(line.split()[1], 16)
    except OSError:
        pass
    return 0


def capability_probe() -> CapabilityReport:
    """Check, without privileges, whether live tracing can work here."""
    reasons = []
    if os.environ.get(FORCE_NO_LIVE_ENV) == "1":
        reasons.append(f"{FORCE_NO_LIVE_ENV}=1 forces the live backend off")
    if not sys.platform.startswith("linux"):
        reasons.append(f"live tracing needs Linux, this is {sys.platform}")
    else:
        caps = _effective_caps()
        privileged = os.geteuid() == 0 or bool(caps & (1 << CAP_SYS_ADMIN)) or (
            bool(caps & (1 << CAP_BPF)) and bool(caps & (1 << CAP_PERFMON))
        )
        if not privileged:
            reasons.append("not root and missing CAP_BPF+CAP_PERFMON (or CAP_SYS_ADMIN)")
        if not any(os.path.isdir(os.path.join(d, "events")) for d in TRACEFS_DIRS):
            reasons.append("tracefs is not mounted (no tracing/events directory)")
    if shutil.which("bpftrace") is None:
        reasons.append("bpftrace executable not found on PATH")
    return CapabilityReport(not reasons, tuple(reasons))


@dataclass
class LiveSessionConfig:
    command: list[str]
    output: Union[str, Path, IO[str]]
    sample_period_ns: Optional[int] = None
    enable_sampling: bool = False
    enable_sched: bool = False
    enable_lifecycle: bool = True
    attach_mode: AttachMode = AttachMode.TRACEPOINTS
    # kind ("fork" | "exec" | "exit") -> bpftrace probe spec; required for uprobes/usdt
    probe_placement: dict = field(default_factory=dict)

    def __post_init__(self):
        self.attach_mode = AttachMode(self.attach_mode)
        if not self.command:
            raise ValueError("command must be a non-empty argv list")
        if not (self.enable_sampling or self.enable_sched or self.enable_lifecycle):
            raise ValueError("enable at least one of sampling, sched, lifecycle")
        if self.enable_sampling and not (self.sample_period_ns and self.sample_period_ns > 0):
            raise ValueError("sampling needs a positive sample_period_ns")


# -- adapter script ------------------------------------------------------------------

_STACK_TAIL = '\\n%sTH END\\n", '


def sampling_hz(period_ns: int) -> int:
    return max(1, round(1e9 / period_ns))


def build_script(config: LiveSessionConfig, child_pid: int) -> str:
    """bpftrace program for the session; raises AttachFailure on bad placement."""
    lines = [f'BEGIN {{ @t[{child_pid}] = 1; printf("TH READY\\n"); }}']
    # fork tracking is always needed to follow descendants, printing only with lifecycle
    fork_print = ' printf("TH F %llu %d %d %d %d\\n", nsecs, pid, tid, cpu, args->child_pid);' if (
        config.enable_lifecycle and config.attach_mode is AttachMode.TRACEPOINTS
    ) else ""
    lines.append(
        "tracepoint:sched:sched_process_fork /@t[args->parent_pid]/ "
        f"{{ @t[args->child_pid] = 1;{fork_print} }}"
    )
    if config.enable_lifecycle:
        if config.attach_mode is AttachMode.TRACEPOINTS:
            lines += [
                "tracepoint:sched:sched_process_exec /@t[tid]/ "
                '{ printf("TH E %llu %d %d %d %s\\n", nsecs, pid, tid, cpu, str(args->filename)); }',
                "tracepoint:syscalls:sys_enter_exit_group /@t[tid]/ { @gcode[pid] = args->error_code; @gset[pid] = 1; }",
                "tracepoint:syscalls:sys_enter_exit /@t[tid]/ { @code[tid] = args->error_code; }",
                "tracepoint:sched:sched_process_exit /@t[tid]/ "
                '{ printf("TH X %llu %d %d %d %d %d %d\\n", nsecs, pid, tid, cpu, @code[tid], @gcode[pid], @gset[pid]);'
                " delete(@t[tid]); }",
            ]
        else:
            lines += _placed_lifecycle_probes(config)
    if config.enable_sched:
        lines.append(
            "tracepoint:sched:sched_switch { "
            'if (@t[args->prev_pid]) { printf("TH O %llu %d %d %d %d' + _STACK_TAIL
            + "nsecs, pid, tid, cpu, args->prev_state, ustack(raw)); } "
            'if (@t[args->next_pid]) { printf("TH I %llu %d %d\\n", nsecs, args->next_pid, cpu); } }'
        )
    if config.enable_sampling:
        hz = sampling_hz(config.sample_period_ns)  # type: ignore[arg-type]
        lines.append(
            f"profile:hz:{hz} /@t[tid]/ "
            '{ printf("TH S %llu %d %d %d' + _STACK_TAIL + "nsecs, pid, tid, cpu, ustack(raw)); }"
        )
    return "\n".join(lines) + "\n"


def _placed_lifecycle_probes(config: LiveSessionConfig) -> list[str]:
    mode = config.attach_mode.value
    placement = config.probe_placement or {}
    missing = [k for k in ("fork", "exec", "exit") if not placement.get(k)]
    if missing:
        raise AttachFailure(mode, f"no probe placement configured for {', '.join(missing)}")
    prefix = "uprobe" if config.attach_mode is AttachMode.UPROBES else "usdt"
    for kind in ("fork", "exec", "exit"):
        spec = placement[kind]
        if not (spec.startswith(prefix) or spec.startswith("uretprobe")):
            raise AttachFailure(mode, f"{kind} placement {spec!r} is not a {prefix} probe")
    fork_spec = placement["fork"]
    child = "retval" if fork_spec.startswith("uretprobe") else "arg0"
    return [
        f"{fork_spec} /@t[tid] && (int64){child} > 0/ "
        f'{{ @t[{child}] = 1; printf("TH F %llu %d %d %d %d\\n", nsecs, pid, tid, cpu, {child}); }}',
        f"{placement['exec']} /@t[tid]/ "
        '{ printf("TH E %llu %d %d %d %s\\n", nsecs, pid, tid, cpu, str(arg0)); }',
        f"{placement['exit']} /@t[tid]/ "
        '{ printf("TH X %llu %d %d %d %d %d 1\\n", nsecs, pid, tid, cpu, arg0, arg0); delete(@t[tid]); }',
    ]


# -- adapter output -> events -----------------------------------------------------------


def _parse_frame(text: str) -> Optional[int]:
    text = text.strip()
    if not text:
        return None
    try:
        return int(text, 16)
    except ValueError:
        return None


def parse_adapter_output(
    lines: Iterable[str],
    period_ns: int = 1,
    root: Optional[tuple[int, int]] = None,
    warnings: Optional[Counter] = None,
) -> list[TraceEvent]:
    """Translate the adapter protocol into a merged, origin-relative stream.

    ``root`` is ``(parent_pid, child_pid)`` of the spawned command; when given,
    a Fork for it is synthesized at the trace origin since that fork happened
    before the probes attached.
    """
    if warnings is None:
        warnings = Counter()
    raw: list[tuple] = []
    pending: Optional[list] = None
    for line in lines:
        line = line.rstrip("\n")
        if pending is not None:
            if line.strip() == "TH END":
                raw.append(tuple(pending))
                pending = None
            else:
                addr = _parse_frame(line)
                if addr is not None:
                    pending[-1].append(addr)
            continue
        parts = line.split()
        if len(parts) < 2 or parts[0] != "TH" or parts[1] == "READY":
            continue
        tag = parts[1]
        try:
            if tag in ("S", "O"):
                pending = [tag, *map(int, parts[2:]), []]
            elif tag == "E":
                raw.append(("E", *map(int, parts[2:6]), " ".join(parts[6:])))
            else:
                raw.append((tag, *map(int, parts[2:])))
        except ValueError:
            warnings["malformed_adapter_line"] += 1
    if pending is not None:
        warnings["unterminated_stack"] += 1

    # learn tgid per tid wherever the emitting task is current
    tgid: dict[int, int] = {}
    for rec in raw:
        if rec[0] in ("S", "O", "E", "X", "F"):
            tgid.setdefault(rec[3], rec[2])

    origin = min((rec[1] for rec in raw), default=0)
    events: list[TraceEvent] = []
    for rec in raw:
        tag, ts = rec[0], rec[1] - origin
        if tag == "S":
            _, _, pid, tid, cpu, stack = rec
            if not stack:
                warnings["sample_without_user_stack"] += 1
                continue
            events.append(TraceEvent.sample(ts, pid, tid, cpu, stack, period_ns))
        elif tag == "O":
            _, _, pid, tid, cpu, state, stack = rec
            wait = WaitKind.RUNNABLE if state == 0 else WaitKind.BLOCKED
            events.append(TraceEvent.switch_out(ts, pid, tid, cpu, stack or None, wait))
        elif tag == "I":
            _, _, tid, cpu = rec
            events.append(TraceEvent.switch_in(ts, tgid.get(tid, tid), tid, cpu))
        elif tag == "F":
            _, _, pid, tid, cpu, child_tid = rec
            events.append(TraceEvent.fork(ts, pid, tid, cpu, tgid.get(child_tid, child_tid), child_tid))
        elif tag == "E":
            _, _, pid, tid, cpu, image = rec
            events.append(TraceEvent.exec(ts, pid, tid, cpu, image))
        elif tag == "X":
            _, _, pid, tid, cpu, code, gcode, gset = rec
            status = gcode if gset else code
            events.append(TraceEvent.exit(ts, pid, tid, cpu, _exit_status(status)))
        else:
            warnings["unknown_adapter_tag"] += 1

    streams = [sorted(s, key=lambda e: e.ts) for s in split_by_cpu(events)]
    if root is not None:
        parent, child = root
        streams.insert(0, [TraceEvent.fork(0, parent, parent, 0, child, child)])
    return merge_streams(streams)


def _exit_status(code: int) -> int:
    return code & 0xFF  # exit(2) keeps the low byte only


# -- recording ----------------------------------------------------------------------------


@dataclass
class RecordResult:
    child_exit_code: int
    n_events: int
    warnings: Counter
    output: Union[str, Path, IO[str]]


class _HeldChild:
    """``command`` forked and blocked just before exec until :meth:`release`.

    ``subprocess.Popen`` cannot do this: it waits for the exec to happen
    before returning, so a gate inside ``preexec_fn`` would deadlock.
    """

    def __init__(self, command: list[str]):
        gate_r, gate_w = os.pipe()
        err_r, err_w = os.pipe()  # close-on-exec: EOF means exec succeeded
        try:
            pid = os.fork()
        except OSError as exc:
            for fd in (gate_r, gate_w, err_r, err_w):
                os.close(fd)
            raise ChildSpawnFailure(f"cannot fork for {command[0]!r}: {exc}") from None
        if pid == 0:
            try:
                os.close(gate_w)
                os.close(err_r)
                if os.read(gate_r, 1):
                    os.execvp(command[0], command)
            except BaseException as exc:
                try:
                    os.write(err_w, str(exc).encode("utf-8", "replace")[:1024])
                finally:
                    os._exit(127)
            os._exit(127)  # parent went away without releasing us
        os.close(gate_r)
        os.close(err_w)
        self.pid = pid
        self.command = command
        self.returncode: Optional[int] = None
        self._gate = gate_w
        self._err = err_r

    def release(self) -> None:
        os.write(self._gate, b"\0")
        self._close_gate()
        chunks = []
        while chunk := os.read(self._err, 1024):
            chunks.append(chunk)
        os.close(self._err)
        self._err = -1
        if chunks:
            self.wait()
            detail = b"".join(chunks).decode("utf-8", "replace")
            raise ChildSpawnFailure(f"cannot start {self.command[0]!r}: {detail}")

    def _close_gate(self) -> None:
        if self._gate >= 0:
            os.close(self._gate)
            self._gate = -1

    def poll(self) -> Optional[int]:
        if self.returncode is None:
            pid, status = os.waitpid(self.pid, os.WNOHANG)
            if pid:
                self.returncode = os.waitstatus_to_exitcode(status)
        return self.returncode

    def wait(self) -> int:
        if self.returncode is None:
            _, status = os.waitpid(self.pid, 0)
            self.returncode = os.waitstatus_to_exitcode(status)
        return self.returncode

    def kill(self) -> None:
        if self.poll() is None:
            os.kill(self.pid, signal.SIGKILL)
            self.wait()

    def close(self) -> None:
        self._close_gate()
        if self._err >= 0:
            os.close(self._err)
            self._err = -1


class _LineReader(threading.Thread):
    """Drains the tracer's stdout; flags the READY handshake."""

    def __init__(self, stream: IO[str]):
        super().__init__(daemon=True)
        self.stream = stream
        self.lines: list[str] = []
        self.ready = threading.Event()

    def run(self):
        for line in self.stream:
            if not self.ready.is_set() and line.strip() == "TH READY":
                self.ready.set()
            self.lines.append(line)


def record(config: LiveSessionConfig) -> RecordResult:
    """Trace ``config.command`` from its first instruction and write replay JSONL."""
    report = capability_probe()
    if not report.tracing_available:
        raise CapabilityDenied(report.reasons)
    if config.attach_mode is not AttachMode.TRACEPOINTS and config.enable_lifecycle:
        _placed_lifecycle_probes(config)  # fail on bad placement before spawning

    if shutil.which(config.command[0]) is None:
        raise ChildSpawnFailure(f"{config.command[0]!r} is not an executable")
    child = _HeldChild(config.command)
    errlog = tempfile.TemporaryFile()
    tracer = None
    try:
        script = build_script(config, child.pid)
        tracer = subprocess.Popen(
            ["bpftrace", "-e", script],
            stdout=subprocess.PIPE,
            stderr=errlog,
            text=True,
        )
        reader = _LineReader(tracer.stdout)  # type: ignore[arg-type]
        reader.start()
        deadline = time.monotonic() + ATTACH_TIMEOUT_S
        while not reader.ready.wait(0.1):
            if tracer.poll() is not None or time.monotonic() > deadline:
                tracer.kill()
                tracer.wait()
                errlog.seek(0)
                err = errlog.read().decode("utf-8", "replace").strip()
                raise AttachFailure(config.attach_mode.value, err or "no READY from bpftrace")
        child.release()
        exit_code = child.wait()
        tracer.send_signal(signal.SIGINT)
        try:
            tracer.wait(timeout=ATTACH_TIMEOUT_S)
        except subprocess.TimeoutExpired:
            tracer.kill()
        reader.join(timeout=5)
        lines = reader.lines
    except BaseException:
        child.kill()
        if tracer is not None and tracer.poll() is None:
            tracer.kill()
        raise
    finally:
        child.close()
        errlog.close()

    warnings: Counter = Counter()
    period = round(1e9 / sampling_hz(config.sample_period_ns)) if config.enable_sampling else 1  # type: ignore[arg-type]
    root = (os.getpid(), child.pid) if config.enable_lifecycle else None
    events = parse_adapter_output(lines, period, root, warnings)
    text = serialize_events(events)
    parse_event_stream(text)  # the output contract: always schema-valid
    if isinstance(config.output, (str, Path)):
        Path(config.output).write_text(text, encoding="utf-8")
    else:
        config.output.write(text)
    return RecordResult(exit_code, len(events), warnings, config.output)
