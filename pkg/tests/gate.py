"""Bookkeeping for the acceptance gate: one PASS/FAIL/SKIP line per criterion."""

import sys
import time
from contextlib import contextmanager

import pytest

RESULTS: list[str] = []


def _emit(line: str) -> None:
    RESULTS.append(line)
    # bypass pytest's capture so the line shows up live in the log
    sys.__stdout__.write(f"\n{line}\n")
    sys.__stdout__.flush()


@contextmanager
def criterion(name: str, time_limit: float):
    """Run a criterion body, enforce its wall-clock limit and record the verdict."""
    start = time.perf_counter()
    detail = {}
    try:
        yield detail
    except pytest.skip.Exception as exc:
        _emit(f"ACCEPTANCE SKIP  {name}: {exc.msg}")
        raise
    except BaseException as exc:
        elapsed = time.perf_counter() - start
        _emit(f"ACCEPTANCE FAIL  {name} ({elapsed:.1f}s): {type(exc).__name__}: {exc}".splitlines()[0])
        raise
    elapsed = time.perf_counter() - start
    info = "; ".join(f"{k}={v}" for k, v in detail.items())
    if elapsed >= time_limit:
        _emit(f"ACCEPTANCE FAIL  {name}: took {elapsed:.1f}s, limit {time_limit:.0f}s ({info})")
        pytest.fail(f"{name} exceeded its {time_limit:.0f}s limit ({elapsed:.1f}s)")
    _emit(f"ACCEPTANCE PASS  {name} ({elapsed:.1f}s < {time_limit:.0f}s; {info})")
