"""
Deterministic-order thread pool map
"""

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, List, Optional, TypeVar

T = TypeVar("T")
R = TypeVar("R")

logger = logging.getLogger(__name__)


def resolve_threads(threads: Optional[int]) -> int:
    """0 or None means one thread per CPU."""
    if threads is None or threads <= 0:
        return max(1, os.cpu_count() or 1)
    return threads


def map_ordered(fn: Callable[[T], R], items: Iterable[T], threads: Optional[int] = 1) -> List[R]:
    """
    Apply fn to every item, returning results in input order.

    numpy releases the GIL inside its kernels, so per-image work overlaps. With one
    thread this is a plain loop.
    """
    items = list(items)
    n = min(resolve_threads(threads), max(1, len(items)))
    if n == 1:
        return [fn(item) for item in items]
    logger.debug(f"map_ordered: {len(items)} items on {n} threads")
    with ThreadPoolExecutor(max_workers=n, thread_name_prefix="calseg") as pool:
        return list(pool.map(fn, items))
