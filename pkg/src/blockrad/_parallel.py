"""Thread-count policy shared by the enumeration and scan kernels."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, TypeVar

T = TypeVar("T")
R = TypeVar("R")


def thread_count(requested: int | None = None) -> int:
    """Worker count: ``requested`` or ``BLOCKRAD_THREADS`` (default 1), at least 1."""
    if requested is not None:
        return max(1, int(requested))
    env = os.environ.get("BLOCKRAD_THREADS", "")
    try:
        return max(1, int(env)) if env else 1
    except ValueError:
        return 1


def ordered_map(fn: Callable[[T], R], items: Iterable[T], threads: int | None = None) -> list[R]:
    """``map`` that may run in a thread pool but always returns input order."""
    items = list(items)
    n = thread_count(threads)
    if n == 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))
