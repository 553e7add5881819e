"""Small shared helpers."""

from __future__ import annotations

import os

THREADS_ENV = "COLLIDE_REFINE_THREADS"


def thread_cap() -> int:
    """Worker-pool cap from COLLIDE_REFINE_THREADS (default 1).

    Results are contractually identical for any cap; the variable only
    bounds how many shards run concurrently."""
    raw = os.environ.get(THREADS_ENV)
    if raw is None:
        return 1
    try:
        n = int(raw)
    except ValueError as e:
        raise ValueError(f"{THREADS_ENV} must be an integer, got {raw!r}") from e
    if n < 1:
        raise ValueError(f"{THREADS_ENV} must be >= 1, got {n}")
    return n
