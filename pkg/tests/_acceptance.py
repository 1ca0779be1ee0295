"""Collects one PASS/FAIL line per acceptance criterion for the terminal summary."""

from __future__ import annotations

import contextlib
import sys
import time

RESULTS: list[str] = []


@contextlib.contextmanager
def criterion(number: int, title: str, budget_s: float | None = None):
    """Run a criterion body; record PASS/FAIL with timing and any ``info`` notes."""
    info: dict = {}
    start = time.perf_counter()
    ok = False
    try:
        yield info
        elapsed = time.perf_counter() - start
        if budget_s is not None:
            info["budget"] = f"{budget_s:.0f} s"
            assert elapsed < budget_s, f"runtime {elapsed:.1f} s exceeds {budget_s:.0f} s"
        ok = True
    finally:
        elapsed = time.perf_counter() - start
        notes = "; ".join(f"{k}={v}" for k, v in info.items())
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:>2}: {title} ({elapsed:.1f} s){' -- ' + notes if notes else ''}"
        RESULTS.append(line)
        print(line, file=sys.stdout)
