"""Order-preserving job maps with an optional process pool."""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from typing import Callable, Iterable, TypeVar

T = TypeVar("T")
R = TypeVar("R")

JOBS_ENV = "VPPFLEX_JOBS"


def default_jobs() -> int:
    try:
        return max(1, int(os.environ.get(JOBS_ENV, "1")))
    except ValueError:
        return 1


def map_jobs(fn: Callable[[T], R], items: Iterable[T], jobs: int | None = None) -> list[R]:
    """``[fn(i) for i in items]``, spread over ``jobs`` processes when > 1."""
    items = list(items)
    jobs = default_jobs() if jobs is None else max(1, int(jobs))
    if jobs == 1 or len(items) < 2:
        return [fn(i) for i in items]
    with ProcessPoolExecutor(max_workers=min(jobs, len(items))) as ex:
        return list(ex.map(fn, items, chunksize=max(1, len(items) // (4 * jobs))))
