"""Order-preserving parallel map capped by ``METACHAIN_THREADS``."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, TypeVar

T = TypeVar("T")
R = TypeVar("R")

ENV_VAR = "METACHAIN_THREADS"


def thread_count() -> int:
    """Worker cap from the environment; 1 (serial) when unset or invalid."""
    raw = os.environ.get(ENV_VAR, "")
    try:
        n = int(raw)
    except ValueError:
        return 1
    return max(1, n)


def pmap(fn: Callable[[T], R], items: Iterable[T]) -> list[R]:
    """``[fn(x) for x in items]``, possibly on threads; result order is input order.

    Callers reduce the returned list in order, so the thread count never
    changes a result.
    """
    items = list(items)
    workers = min(thread_count(), len(items))
    if workers <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))
