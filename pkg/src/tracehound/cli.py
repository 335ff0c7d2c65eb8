"""tracehound command line.

Exit codes: 0 success, 1 runtime failure, 2 usage or input error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import bench, live, pipeline
from .errors import InputError, InvalidRange, TraceHoundError
from .proctree import parse_key
from .profiles import to_folded
from .symbols import EMPTY_MAP, load_symbol_map
from .trace import load_events
from .workload import self_workload

log = logging.getLogger("tracehound")


class UsageError(InputError):
    pass


def _scope_arg(text: str):
    try:
        return parse_key(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc))


def _trim_arg(text: str) -> float:
    p = float(text)
    if not 0 <= p < 0.5:
        raise argparse.ArgumentTypeError("trim fraction must be in [0, 0.5)")
    return p


def _write_artifacts(out: Path, artifacts: dict[str, str]) -> None:
    out.mkdir(parents=True, exist_ok=True)
    for name, text in artifacts.items():
        (out / name).write_text(text, encoding="utf-8")


def _load_analysis(args) -> pipeline.Analysis:
    streams = []
    for path in args.events:
        try:
            streams.append(load_events(path))
        except InputError as exc:
            exc.args = (f"{path}: {exc}",)
            raise
    symbols = load_symbol_map(args.symbols) if args.symbols else EMPTY_MAP
    events = pipeline.order_events(streams)
    return pipeline.analyze(events, symbols, args.scope, "count" if args.count else "period")


# -- subcommands -------------------------------------------------------------------


def cmd_replay(args) -> int:
    analysis = _load_analysis(args)
    _write_artifacts(Path(args.out), analysis.artifacts())
    print(
        f"{len(analysis.events)} events, {len(analysis.tree.nodes)} tasks, "
        f"{len(analysis.on_cpu.entries)} on-CPU stacks, {len(analysis.off_cpu.entries)} off-CPU stacks -> {args.out}"
    )
    for w in analysis.trace_warnings:
        log.warning("trace: %s", w)
    return 0


def cmd_report(args) -> int:
    if args.bench:
        results = json.loads((Path(args.bench) / "results.json").read_text(encoding="utf-8"))
        stats = [bench.BenchStats(**s) for s in results["stats"]]
        sys.stdout.write(bench.render_table(stats) + "\n" + bench.render_overheads(results["overhead_percent"], results["baseline"]))
        return 0
    if not args.events:
        raise UsageError("report needs --events or --bench")
    analysis = _load_analysis(args)
    if args.tree:
        sys.stdout.write(analysis.tree.to_json())
    elif args.off_cpu:
        sys.stdout.write(to_folded(analysis.off_cpu))
    elif args.accounting:
        sys.stdout.write(analysis.accounting_json())
    else:
        sys.stdout.write(to_folded(analysis.on_cpu))
    return 0


def cmd_bench(args) -> int:
    plan = bench.load_plan(args.plan)
    records = bench.run_benchmark(plan, allow_unpinned=args.allow_unpinned)
    report = bench.analyze(plan, records, trim=args.trim)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "results.json").write_text(json.dumps(report.results_dict(), indent=2) + "\n", encoding="utf-8")
    (out / "breakdown.json").write_text(json.dumps(report.breakdown_dict(), indent=2) + "\n", encoding="utf-8")
    (out / "breakdown.csv").write_text(bench.breakdown_csv(report.breakdown), encoding="utf-8")
    (out / "table.txt").write_text(report.table, encoding="utf-8")
    if not args.json:
        sys.stdout.write(report.table)
    return 0


def cmd_workload(args) -> int:
    if args.repeat < 1:
        raise InvalidRange(f"repeat must be >= 1, got {args.repeat}")
    checksum = 0.0
    for _ in range(args.repeat):
        checksum = self_workload(args.lo, args.hi, args.iters)
    print(f"{checksum:.9f}")
    return 0


def cmd_probe(args) -> int:
    print(json.dumps(live.capability_probe().to_dict(), indent=2))
    return 0


def cmd_profile(args) -> int:
    command = args.command[1:] if args.command[:1] == ["--"] else args.command
    if not command:
        raise UsageError("profile needs a command after '--'")
    placement = {}
    if args.probe_config:
        placement = json.loads(Path(args.probe_config).read_text(encoding="utf-8"))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    events_path = out / "events.jsonl"
    try:
        config = live.LiveSessionConfig(
            command=command,
            output=events_path,
            sample_period_ns=args.sample_period,
            enable_sampling=args.sample_period is not None,
            enable_sched=args.sched,
            enable_lifecycle=args.lifecycle or not (args.sched or args.sample_period is not None),
            attach_mode=args.attach,
            probe_placement=placement,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    result = live.record(config)
    print(f"child exited with {result.child_exit_code}; {result.n_events} events -> {events_path}")
    args.events = [str(events_path)]
    return cmd_replay(args)


# -- parser ------------------------------------------------------------------------------


def _analysis_flags(p: argparse.ArgumentParser, events_required: bool) -> None:
    p.add_argument("--events", action="append", required=events_required, metavar="F",
                   help="replay JSONL file; repeat for per-CPU files")
    p.add_argument("--symbols", metavar="F", help="symbol map (HEXSTART HEXSIZE NAME per line)")
    p.add_argument("--scope", type=_scope_arg, metavar="PID:TID[:GEN]",
                   help="restrict profiles to this task and its descendants")
    p.add_argument("--count", action="store_true", help="weight samples by count instead of period")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tracehound", description="On/off-CPU and lifecycle profiler with an overhead benchmark harness.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("replay", help="analyze a recorded trace")
    _analysis_flags(p, events_required=True)
    p.add_argument("--out", required=True, metavar="DIR")
    p.set_defaults(func=cmd_replay)

    p = sub.add_parser("report", help="print one artifact to stdout")
    _analysis_flags(p, events_required=False)
    what = p.add_mutually_exclusive_group()
    what.add_argument("--tree", action="store_true", help="process tree JSON")
    what.add_argument("--on-cpu", action="store_true", help="folded on-CPU stacks (default)")
    what.add_argument("--off-cpu", action="store_true", help="folded off-CPU stacks")
    what.add_argument("--accounting", action="store_true", help="walltime accounting JSON")
    what.add_argument("--bench", metavar="DIR", help="re-render the table of a bench output dir")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("bench", help="run a benchmark plan")
    p.add_argument("--plan", required=True, metavar="F")
    p.add_argument("--out", required=True, metavar="DIR")
    p.add_argument("--json", action="store_true", help="write artifacts only, no table on stdout")
    p.add_argument("--allow-unpinned", action="store_true", help="run unpinned instead of failing")
    p.add_argument("--trim", type=_trim_arg, default=0.0, metavar="P",
                   help="drop this fraction of runs from each tail (default 0)")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("workload", help="bundled square-root workload")
    p.add_argument("--lo", type=int, default=1)
    p.add_argument("--hi", type=int, default=100)
    p.add_argument("--iters", type=int, default=20)
    p.add_argument("--repeat", type=int, default=1)
    p.set_defaults(func=cmd_workload)

    p = sub.add_parser("probe", help="report whether live tracing is available")
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("profile", help="record a command live, then replay it")
    p.add_argument("--sample-period", type=int, metavar="NS")
    p.add_argument("--sched", action="store_true", help="trace context switches")
    p.add_argument("--lifecycle", action="store_true", help="trace fork/exec/exit")
    p.add_argument("--attach", choices=[m.value for m in live.AttachMode], default="tracepoints")
    p.add_argument("--probe-config", metavar="F", help="JSON {fork, exec, exit} probe placement for uprobes/usdt")
    p.add_argument("--symbols", metavar="F")
    p.add_argument("--scope", type=_scope_arg, metavar="PID:TID[:GEN]")
    p.add_argument("--count", action="store_true")
    p.add_argument("--out", required=True, metavar="DIR")
    p.add_argument("command", nargs=argparse.REMAINDER)
    p.set_defaults(func=cmd_profile)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="tracehound: %(levelname)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except TraceHoundError as exc:
        print(f"tracehound: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (FileNotFoundError, IsADirectoryError, PermissionError, UnicodeDecodeError, json.JSONDecodeError) as exc:
        print(f"tracehound: error: {exc}", file=sys.stderr)
        return 2
    except Exception:
        log.exception("internal error")
        return 1


if __name__ == "__main__":
    sys.exit(main())
