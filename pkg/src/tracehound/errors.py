"""Exception hierarchy shared by every tracehound pipeline stage."""

from __future__ import annotations


class TraceHoundError(Exception):
    """Base class. ``exit_code`` is what the CLI returns when it escapes."""

    exit_code = 1


class InputError(TraceHoundError):
    """Bad user input: malformed files, invalid plans, bad ranges."""

    exit_code = 2


# -- trace model --------------------------------------------------------------


class TraceParseError(InputError):
    def __init__(self, line_no: int, message: str):
        self.line_no = line_no
        super().__init__(f"line {line_no}: {message}")


class MalformedLine(TraceParseError):
    def __init__(self, line_no: int, detail: str = "not valid JSON"):
        super().__init__(line_no, detail)


class SchemaViolation(TraceParseError):
    def __init__(self, line_no: int, field: str, detail: str = "missing or ill-typed"):
        self.field = field
        super().__init__(line_no, f"field {field!r}: {detail}")


class NonMonotoneTimestamp(TraceParseError):
    def __init__(self, line_no: int, cpu: int | None = None, ts: int | None = None, prev: int | None = None):
        self.cpu = cpu
        super().__init__(line_no, f"timestamp {ts} regresses below {prev} on cpu {cpu}")


# -- process tree -------------------------------------------------------------


class ProcTreeError(InputError):
    pass


class ExitWithoutSpawn(ProcTreeError):
    def __init__(self, tid: int, ts: int | None = None):
        self.tid = tid
        super().__init__(f"exit of tid {tid} at ts={ts} has no live task")


class DuplicateLiveTid(ProcTreeError):
    def __init__(self, tid: int, ts: int | None = None):
        self.tid = tid
        super().__init__(f"fork creates tid {tid} at ts={ts} while it is still live")


class UnknownNode(ProcTreeError):
    def __init__(self, key):
        self.key = key
        super().__init__(f"no task node {key!r}")


# -- symbols ------------------------------------------------------------------


class SymbolMapError(InputError):
    pass


class SymbolMapMalformed(SymbolMapError):
    def __init__(self, line_no: int, detail: str):
        self.line_no = line_no
        super().__init__(f"symbol map line {line_no}: {detail}")


class OverlappingRange(SymbolMapError):
    def __init__(self, start_a: int, start_b: int):
        self.start_a = start_a
        self.start_b = start_b
        super().__init__(f"symbol ranges at {start_a:#x} and {start_b:#x} overlap")


class FoldedParseError(InputError):
    pass


# -- bench --------------------------------------------------------------------


class PlanError(InputError):
    def __init__(self, field: str, detail: str):
        self.field = field
        super().__init__(f"plan field {field!r}: {detail}")


class InsufficientRuns(InputError):
    pass


class ZeroBaseline(InputError):
    pass


class InvalidRange(InputError):
    pass


class BenchRunError(TraceHoundError):
    pass


class SpawnFailure(BenchRunError):
    def __init__(self, config: str, run: int, detail: str):
        self.config = config
        self.run = run
        super().__init__(f"{config} run {run}: cannot spawn: {detail}")


class NonZeroExit(BenchRunError):
    def __init__(self, config: str, run: int, code: int):
        self.config = config
        self.run = run
        self.code = code
        super().__init__(f"{config} run {run}: exited with code {code}")


class PinUnsupported(TraceHoundError):
    pass


class InvalidCore(PinUnsupported):
    exit_code = 2


# -- live ---------------------------------------------------------------------


class LiveError(TraceHoundError):
    pass


class CapabilityDenied(LiveError):
    def __init__(self, reasons):
        self.reasons = list(reasons)
        super().__init__("live tracing unavailable: " + "; ".join(self.reasons))


class AttachFailure(LiveError):
    def __init__(self, mechanism: str, detail: str):
        self.mechanism = mechanism
        super().__init__(f"attaching {mechanism} probes failed: {detail}")


class ChildSpawnFailure(LiveError):
    pass
