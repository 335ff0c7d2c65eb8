"""Address-range symbol tables in the perf-map text format.

Each line is ``HEXSTART HEXSIZE NAME``; the name is the remainder of the
line and may contain spaces.
"""

from __future__ import annotations

import bisect
from dataclasses import dataclass
from typing import IO, Iterable, NamedTuple

from .errors import OverlappingRange, SymbolMapMalformed


class SymbolEntry(NamedTuple):
    start: int
    size: int
    name: str

    @property
    def end(self) -> int:
        return self.start + self.size


@dataclass(frozen=True)
class SymbolMap:
    entries: tuple[SymbolEntry, ...] = ()

    def __post_init__(self):
        entries = tuple(sorted(self.entries))
        for e in entries:
            if e.size <= 0:
                raise ValueError(f"symbol {e.name!r} has non-positive size")
        for a, b in zip(entries, entries[1:]):
            if b.start < a.end:
                raise OverlappingRange(a.start, b.start)
        object.__setattr__(self, "entries", entries)
        object.__setattr__(self, "_starts", [e.start for e in entries])

    def __len__(self) -> int:
        return len(self.entries)

    def lookup(self, addr: int) -> str | None:
        i = bisect.bisect_right(self._starts, addr) - 1  # type: ignore[attr-defined]
        if i >= 0:
            e = self.entries[i]
            if addr < e.end:
                return e.name
        return None


EMPTY_MAP = SymbolMap()


def unknown_frame(addr: int) -> str:
    return f"[unknown:{addr:#x}]"


def symbolize(addr: int, symbols: SymbolMap) -> str:
    """Name of the range containing ``addr``, else ``[unknown:0x...]``."""
    name = symbols.lookup(addr)
    return unknown_frame(addr) if name is None else name


def parse_symbol_map(reader: IO[str] | IO[bytes] | Iterable[str | bytes] | str) -> SymbolMap:
    if isinstance(reader, str):
        reader = reader.splitlines()
    entries = []
    for line_no, raw in enumerate(reader, start=1):
        if isinstance(raw, bytes):
            try:
                raw = raw.decode("utf-8")
            except UnicodeDecodeError:
                raise SymbolMapMalformed(line_no, "invalid UTF-8") from None
        line = raw.strip()
        if not line:
            continue
        parts = line.split(None, 2)
        if len(parts) != 3:
            raise SymbolMapMalformed(line_no, "expected 'HEXSTART HEXSIZE NAME'")
        try:
            start = int(parts[0], 16)
            size = int(parts[1], 16)
        except ValueError:
            raise SymbolMapMalformed(line_no, "start and size must be hexadecimal") from None
        if start < 0 or size <= 0:
            raise SymbolMapMalformed(line_no, "size must be positive")
        entries.append(SymbolEntry(start, size, parts[2]))
    return SymbolMap(tuple(entries))


def load_symbol_map(path) -> SymbolMap:
    with open(path, "rb") as fh:
        return parse_symbol_map(fh)
