"""
Work Item Runner

Runs indexed Monte Carlo work items inline or on a process pool, returning results in item order.
"""

from typing import Callable, List, Sequence, TypeVar
import concurrent.futures
import logging
import multiprocessing
import time

logger = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")


def chunk_sizes(total: int, chunk: int) -> List[int]:
    """Split total draws into chunks of at most `chunk`, the last one shorter."""
    if total <= 0:
        return []
    if chunk <= 0:
        raise ValueError(f"chunk size must be positive, got {chunk}")
    full, rest = divmod(total, chunk)
    return [chunk] * full + ([rest] if rest else [])


def run_work_items(fn: Callable[[T], R], items: Sequence[T], workers: int = 1) -> List[R]:
    """
    Evaluate fn over items.

    Each item carries its own random stream, so a result depends only on
    its item and the returned list is in item order whatever `workers` is.

    Args:
        fn: Picklable top-level function
        items: Work items
        workers: 1 runs inline; more uses a spawn-context process pool

    Returns:
        List of results, one per item, in item order
    """
    if workers < 1:
        raise ValueError(f"workers must be >= 1, got {workers}")

    start = time.time()
    if workers == 1 or len(items) <= 1:
        results = [fn(item) for item in items]
    else:
        context = multiprocessing.get_context("spawn")
        with concurrent.futures.ProcessPoolExecutor(max_workers=workers, mp_context=context) as executor:
            results = list(executor.map(fn, items))

    logger.debug(f"Ran {len(items)} work items on {workers} worker(s) in {time.time() - start:.2f}s")
    return results
