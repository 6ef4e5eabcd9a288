"""Ordered fan-out over a fork-based process pool.

Work functions read shared inputs from module globals installed before the
pool forks, so large tables are inherited rather than pickled. Results come
back in submission order regardless of worker count.
"""
from __future__ import annotations

import multiprocessing as mp
import os
from typing import Callable, Iterable, Iterator

_SHARED: dict = {}


def default_workers() -> int:
    try:
        return max(1, len(os.sched_getaffinity(0)))
    except AttributeError:
        return max(1, os.cpu_count() or 1)


def shared(key: str):
    return _SHARED[key]


def imap_ordered(fn: Callable, items: Iterable, workers: int, state: dict | None = None) -> Iterator:
    items = list(items)
    _SHARED.clear()
    _SHARED.update(state or {})
    try:
        if workers <= 1 or len(items) <= 1 or "fork" not in mp.get_all_start_methods():
            for item in items:
                yield fn(item)
            return
        ctx = mp.get_context("fork")
        with ctx.Pool(min(workers, len(items))) as pool:
            yield from pool.imap(fn, items, chunksize=1)
    finally:
        _SHARED.clear()
