"""Worker-count control via the TWINDROP_THREADS environment variable."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor


def thread_count() -> int:
    """Worker cap from TWINDROP_THREADS; defaults to 1 (sequential)."""
    raw = os.environ.get("TWINDROP_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def map_indexed(fn, items):
    """Apply fn to items, results in input order regardless of scheduling.

    Each item must carry its own random stream; fn must not share
    mutable state across items.
    """
    items = list(items)
    workers = min(thread_count(), max(1, len(items)))
    if workers <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))
