"""Bundled square-root workload used as the default benchmark target."""

from __future__ import annotations

from .errors import InvalidRange


def newton_sqrt(n: float, iters: int) -> float:
    x = float(n)
    for _ in range(iters):
        x = (x + n / x) / 2.0
    return x


def self_workload(lo: int = 1, hi: int = 100, iters: int = 20) -> float:
    """Approximate sqrt(n) for n in [lo, hi] by Newton-Raphson from x0 = n.

    Returns the sum of the approximations; the order of summation is fixed
    so the checksum is bit-identical run to run.
    """
    if lo < 1 or lo > hi:
        raise InvalidRange(f"need 1 <= lo <= hi, got lo={lo} hi={hi}")
    if iters < 1:
        raise InvalidRange(f"iters must be >= 1, got {iters}")
    checksum = 0.0
    for n in range(lo, hi + 1):
        checksum += newton_sqrt(n, iters)
    return checksum
