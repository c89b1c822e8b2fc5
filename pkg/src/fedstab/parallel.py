"""Ordered map over independent tasks, serial or in worker processes.

Results come back in task order regardless of the worker count, and BLAS is
pinned to one thread in every process so reductions do not depend on it.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from typing import Callable, Iterable, TypeVar

from threadpoolctl import threadpool_limits

T = TypeVar("T")
R = TypeVar("R")


def _worker_init():
    threadpool_limits(limits=1)


def ordered_map(fn: Callable[[T], R], items: Iterable[T], jobs: int = 1) -> list[R]:
    items = list(items)
    if jobs <= 1 or len(items) <= 1:
        with threadpool_limits(limits=1):
            return [fn(it) for it in items]
    with ProcessPoolExecutor(max_workers=jobs, initializer=_worker_init) as pool:
        return list(pool.map(fn, items))
