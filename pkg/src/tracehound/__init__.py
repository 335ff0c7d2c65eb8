"""On-CPU, off-CPU and process-lifecycle profiling over replayable traces,
plus an instrumentation-overhead benchmark harness."""

from .bench import BenchPlan, BenchStats, RunRecord, relative_overhead, run_benchmark, summarize, sys_user_breakdown
from .proctree import ProcessTree, TaskNode, apply_lifecycle_event, build_tree, descendants_of, lifetime_of
from .profiles import (
    OffCpuInterval,
    Profile,
    aggregate_samples,
    build_offcpu_profile,
    pair_context_switches,
    parse_folded,
    to_folded,
    walltime_accounting,
)
from .symbols import SymbolMap, parse_symbol_map, symbolize
from .trace import EventKind, TraceEvent, merge_streams, parse_event_stream, validate_trace
from .workload import self_workload

__version__ = "0.1.0"
