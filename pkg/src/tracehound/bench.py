"""Warm-up plus measured runs of commands under several configurations.

Runs are serial and config-major, optionally pinned to one core. Each run's
wall time comes from a monotonic clock around the child's lifetime and its
user/system time from ``wait4`` resource usage.
"""

from __future__ import annotations

import contextlib
import csv
import io
import json
import logging
import math
import os
import statistics
import subprocess
import time
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import ContextManager, Iterable, Optional, Sequence

from .errors import (
    InsufficientRuns,
    InvalidCore,
    NonZeroExit,
    PinUnsupported,
    PlanError,
    SpawnFailure,
    ZeroBaseline,
)

log = logging.getLogger(__name__)

TABLE_HEADER = "Type | Mean (ms) | Stddev (ms) | Median (ms) | Min (ms) | Max (ms)"
DEFAULT_MAX_RETRIES = 3
NS_PER_MS = 1_000_000


class Instrumentation(str, Enum):
    NONE = "none"
    USDT = "usdt"
    UPROBES = "uprobes"
    CUSTOM = "custom"


@dataclass(frozen=True)
class BenchConfig:
    name: str
    command: tuple[str, ...]
    env: dict = field(default_factory=dict)
    instrumentation: Instrumentation = Instrumentation.NONE


@dataclass(frozen=True)
class BenchPlan:
    configurations: tuple[BenchConfig, ...]
    warmup_runs: int
    measured_runs: int
    pin_core: Optional[int]
    baseline_name: str
    max_retries: int = DEFAULT_MAX_RETRIES

    def __post_init__(self):
        if not self.configurations:
            raise PlanError("configurations", "at least one configuration is required")
        names = [c.name for c in self.configurations]
        if len(set(names)) != len(names):
            raise PlanError("configurations", "configuration names must be unique")
        if self.measured_runs < 2:
            raise PlanError("measured_runs", f"must be >= 2, got {self.measured_runs}")
        if self.warmup_runs < 0:
            raise PlanError("warmup_runs", "must be >= 0")
        if self.max_retries < 0:
            raise PlanError("max_retries", "must be >= 0")
        if self.pin_core is not None and self.pin_core < 0:
            raise PlanError("pin_core", "must be a non-negative core index")
        if names.count(self.baseline_name) != 1:
            raise PlanError("baseline", f"{self.baseline_name!r} does not name a configuration")

    def config(self, name: str) -> BenchConfig:
        return next(c for c in self.configurations if c.name == name)


_PLAN_KEYS = {"configurations", "warmup_runs", "measured_runs", "pin_core", "baseline", "max_retries"}
_CONFIG_KEYS = {"name", "command", "env", "instrumentation"}


def _require(d: dict, key: str, typ, where: str = ""):
    if key not in d:
        raise PlanError(where + key, "missing")
    v = d[key]
    if typ is int and type(v) is not int:
        raise PlanError(where + key, f"expected an integer, got {v!r}")
    if typ is not int and not isinstance(v, typ):
        raise PlanError(where + key, f"expected {typ.__name__}, got {type(v).__name__}")
    return v


def plan_from_dict(d) -> BenchPlan:
    if not isinstance(d, dict):
        raise PlanError("<plan>", "must be a JSON object")
    unknown = sorted(set(d) - _PLAN_KEYS)
    if unknown:
        raise PlanError(unknown[0], "unknown field")
    configs = []
    for i, c in enumerate(_require(d, "configurations", list)):
        where = f"configurations[{i}]."
        if not isinstance(c, dict):
            raise PlanError(where[:-1], "must be an object")
        unknown = sorted(set(c) - _CONFIG_KEYS)
        if unknown:
            raise PlanError(where + unknown[0], "unknown field")
        name = _require(c, "name", str, where)
        command = _require(c, "command", list, where)
        if not command or not all(isinstance(a, str) for a in command):
            raise PlanError(where + "command", "must be a non-empty argv list of strings")
        env = c.get("env", {})
        if not isinstance(env, dict) or not all(isinstance(k, str) and isinstance(v, str) for k, v in env.items()):
            raise PlanError(where + "env", "must map strings to strings")
        try:
            instr = Instrumentation(c.get("instrumentation", "none"))
        except ValueError:
            raise PlanError(where + "instrumentation", f"unknown mode {c.get('instrumentation')!r}") from None
        configs.append(BenchConfig(name, tuple(command), dict(env), instr))
    pin = d.get("pin_core")
    if pin is not None and type(pin) is not int:
        raise PlanError("pin_core", "expected an integer or null")
    return BenchPlan(
        configurations=tuple(configs),
        warmup_runs=_require(d, "warmup_runs", int),
        measured_runs=_require(d, "measured_runs", int),
        pin_core=pin,
        baseline_name=_require(d, "baseline", str),
        max_retries=d["max_retries"] if type(d.get("max_retries")) is int else DEFAULT_MAX_RETRIES,
    )


def load_plan(path) -> BenchPlan:
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except ValueError as exc:
        raise PlanError("<plan>", f"not valid JSON: {exc}") from None
    return plan_from_dict(raw)


@dataclass(frozen=True)
class RunRecord:
    config_name: str
    run_index: int
    wall_ns: int
    user_ns: int
    sys_ns: int
    exit_code: int


@dataclass(frozen=True)
class BenchStats:
    config_name: str
    mean_ms: float
    stddev_ms: float
    median_ms: float
    min_ms: float
    max_ms: float
    user_ms_total: float
    sys_ms_total: float
    n: int


# -- pinning ------------------------------------------------------------------------


def pin_to_core(core: int) -> ContextManager[None]:
    """Validate ``core`` and return a context that pins this process to it.

    Children inherit the affinity mask, so every benchmark process spawned
    inside the context runs on ``core``; the previous mask is restored on
    exit. Pinning the harness instead of each child in a pre-exec hook keeps
    the fast spawn path, which has far less timing jitter.
    """
    if not hasattr(os, "sched_setaffinity"):
        raise PinUnsupported("this host has no CPU affinity control")
    try:
        allowed = os.sched_getaffinity(0)
    except OSError as exc:
        raise PinUnsupported(f"cannot read CPU affinity: {exc}") from None
    if core not in allowed:
        raise InvalidCore(f"core {core} is not available here (allowed: {sorted(allowed)})")
    return _pinned(core, allowed)


@contextlib.contextmanager
def _pinned(core: int, previous: set):
    try:
        os.sched_setaffinity(0, {core})
    except OSError as exc:
        raise PinUnsupported(f"cannot set CPU affinity: {exc}") from None
    try:
        yield
    finally:
        os.sched_setaffinity(0, previous)


def _resolve_pinning(plan: BenchPlan, allow_unpinned: bool) -> ContextManager[None]:
    if plan.pin_core is None:
        if not allow_unpinned:
            raise PlanError("pin_core", "not set; pass --allow-unpinned to measure unpinned")
        log.warning("!!! UNPINNED: no pin_core in plan, runs may migrate between cores")
        return contextlib.nullcontext()
    try:
        return pin_to_core(plan.pin_core)
    except InvalidCore:
        raise
    except PinUnsupported as exc:
        if not allow_unpinned:
            raise
        log.warning("!!! UNPINNED: %s; continuing because --allow-unpinned is set", exc)
        return contextlib.nullcontext()


# -- running ------------------------------------------------------------------------


def run_once(config: BenchConfig, run_index: int = 0) -> RunRecord:
    env = dict(os.environ)
    env.update(config.env)
    start = time.perf_counter_ns()
    try:
        proc = subprocess.Popen(
            config.command,
            stdin=subprocess.DEVNULL,
            stdout=subprocess.DEVNULL,
            stderr=subprocess.DEVNULL,
            env=env,
        )
    except (OSError, subprocess.SubprocessError) as exc:
        raise SpawnFailure(config.name, run_index, str(exc)) from None
    _, status, usage = os.wait4(proc.pid, 0)
    wall = time.perf_counter_ns() - start
    code = os.waitstatus_to_exitcode(status)
    proc.returncode = code  # already reaped; keep Popen from waiting again
    return RunRecord(
        config.name,
        run_index,
        max(wall, 1),
        round(usage.ru_utime * 1e9),
        round(usage.ru_stime * 1e9),
        code,
    )


def _accepted_run(config: BenchConfig, run_index: int, max_retries: int) -> RunRecord:
    for attempt in range(max_retries + 1):
        rec = run_once(config, run_index)
        if rec.exit_code == 0:
            return rec
        log.info("%s run %d attempt %d exited %d", config.name, run_index, attempt, rec.exit_code)
    raise NonZeroExit(config.name, run_index, rec.exit_code)


def run_benchmark(plan: BenchPlan, allow_unpinned: bool = False) -> list[RunRecord]:
    """Execute the plan config-major; warm-up runs are discarded."""
    records = []
    with _resolve_pinning(plan, allow_unpinned):
        for config in plan.configurations:
            for i in range(plan.warmup_runs):
                _accepted_run(config, -1 - i, plan.max_retries)
            for i in range(plan.measured_runs):
                records.append(_accepted_run(config, i, plan.max_retries))
    return records


# -- statistics ---------------------------------------------------------------------


def trimmed(values: Sequence[float], fraction: float) -> list[float]:
    """Drop ``floor(n * fraction)`` values from each tail."""
    if not 0 <= fraction < 0.5:
        raise ValueError("trim fraction must be in [0, 0.5)")
    ordered = sorted(values)
    k = math.floor(len(ordered) * fraction)
    return ordered[k: len(ordered) - k]


def summarize(records: Sequence[RunRecord], trim: float = 0.0) -> BenchStats:
    if not records:
        raise InsufficientRuns("no records to summarize")
    names = {r.config_name for r in records}
    if len(names) != 1:
        raise ValueError(f"records mix configurations: {sorted(names)}")
    walls = [r.wall_ns / NS_PER_MS for r in records]
    if trim:
        walls = trimmed(walls, trim)
    if len(walls) < 2:
        raise InsufficientRuns(f"need at least 2 runs, got {len(walls)}")
    return BenchStats(
        config_name=names.pop(),
        mean_ms=statistics.fmean(walls),
        stddev_ms=statistics.stdev(walls),
        median_ms=statistics.median(walls),
        min_ms=min(walls),
        max_ms=max(walls),
        user_ms_total=sum(r.user_ns for r in records) / NS_PER_MS,
        sys_ms_total=sum(r.sys_ns for r in records) / NS_PER_MS,
        n=len(walls),
    )


def group_by_config(records: Iterable[RunRecord]) -> dict[str, list[RunRecord]]:
    out: dict[str, list[RunRecord]] = {}
    for r in records:
        out.setdefault(r.config_name, []).append(r)
    return out


def relative_overhead(candidate: BenchStats, baseline: BenchStats) -> float:
    """Percent increase of the candidate mean over the baseline mean."""
    if not baseline.mean_ms > 0:
        raise ZeroBaseline(f"baseline {baseline.config_name!r} has mean {baseline.mean_ms}")
    return 100.0 * (candidate.mean_ms - baseline.mean_ms) / baseline.mean_ms


@dataclass(frozen=True)
class Breakdown:
    config_name: str
    n: int
    user_ms_total: float
    sys_ms_total: float
    user_mean: float
    sys_mean: float


def sys_user_breakdown(records: Iterable[RunRecord]) -> dict[str, Breakdown]:
    out = {}
    for name, recs in group_by_config(records).items():
        user = sum(r.user_ns for r in recs) / NS_PER_MS
        sys_ = sum(r.sys_ns for r in recs) / NS_PER_MS
        out[name] = Breakdown(name, len(recs), user, sys_, user / len(recs), sys_ / len(recs))
    return out


# -- reporting ----------------------------------------------------------------------


def render_table(stats: Sequence[BenchStats]) -> str:
    lines = [TABLE_HEADER]
    for s in stats:
        lines.append(
            f"{s.config_name} | {s.mean_ms:.3f} | {s.stddev_ms:.3f} | {s.median_ms:.3f} | {s.min_ms:.3f} | {s.max_ms:.3f}"
        )
    return "\n".join(lines) + "\n"


def render_overheads(overheads: dict[str, float], baseline: str) -> str:
    return "".join(f"Overhead {name} vs {baseline}: {pct:+.2f}%\n" for name, pct in overheads.items())


def breakdown_csv(breakdown: dict[str, Breakdown]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["config", "n", "user_ms_total", "sys_ms_total", "user_ms_mean", "sys_ms_mean"])
    for b in breakdown.values():
        writer.writerow([b.config_name, b.n, repr(b.user_ms_total), repr(b.sys_ms_total), repr(b.user_mean), repr(b.sys_mean)])
    return buf.getvalue()


@dataclass
class BenchReport:
    plan: BenchPlan
    records: list[RunRecord]
    stats: list[BenchStats]
    overheads: dict[str, float]
    breakdown: dict[str, Breakdown]

    def results_dict(self) -> dict:
        return {
            "baseline": self.plan.baseline_name,
            "records": [asdict(r) for r in self.records],
            "stats": [asdict(s) for s in self.stats],
            "overhead_percent": self.overheads,
        }

    def breakdown_dict(self) -> dict:
        return {name: asdict(b) for name, b in self.breakdown.items()}

    @property
    def table(self) -> str:
        return render_table(self.stats) + "\n" + render_overheads(self.overheads, self.plan.baseline_name)


def analyze(plan: BenchPlan, records: list[RunRecord], trim: float = 0.0) -> BenchReport:
    grouped = group_by_config(records)
    stats = [summarize(grouped[c.name], trim) for c in plan.configurations]
    by_name = {s.config_name: s for s in stats}
    base = by_name[plan.baseline_name]
    overheads = {
        s.config_name: relative_overhead(s, base) for s in stats if s.config_name != plan.baseline_name
    }
    return BenchReport(plan, records, stats, overheads, sys_user_breakdown(records))
