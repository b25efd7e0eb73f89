from __future__ import annotations

import asyncio
import os
from typing import List, Protocol, Sequence, TypeVar

from fixthresh.errors import ConfigError

T = TypeVar("T")
R = TypeVar("R")

THREADS_ENV_VAR = "FIXTHRESH_THREADS"


class ItemHandler(Protocol[T, R]):
    """
    Protocol for per-item work.

    Any plain callable taking one item and returning one result can be used.
    Handlers must be pure: results may not depend on execution order.
    """

    def __call__(self, item: T) -> R:
        ...


def thread_budget() -> int:
    """
    Parallelism cap: the FIXTHRESH_THREADS env var, else the CPU count.

    Raises:
        ConfigError: if FIXTHRESH_THREADS is set but not a positive integer.
    """
    raw = os.getenv(THREADS_ENV_VAR)
    if raw is None or raw.strip() == "":
        return os.cpu_count() or 1

    try:
        threads = int(raw)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV_VAR} must be an integer, got {raw!r}")

    if threads < 1:
        raise ConfigError(f"{THREADS_ENV_VAR} must be >= 1, got {threads}")
    return threads


async def _process_batches(
    items: Sequence[T],
    handler: ItemHandler[T, R],
    batch_size: int,
) -> List[R]:
    results: List[R] = []
    for start in range(0, len(items), batch_size):
        batch = items[start : start + batch_size]
        # gather keeps input order regardless of completion order
        tasks = [asyncio.to_thread(handler, item) for item in batch]
        results.extend(await asyncio.gather(*tasks))
    return results


def run_in_batches(
    items: Sequence[T],
    handler: ItemHandler[T, R],
    batch_size: int | None = None,
) -> List[R]:
    """
    Apply handler to every item, batch_size items at a time in worker threads.

    Results come back in input order, so the output equals
    [handler(item) for item in items].
    """
    if batch_size is None:
        batch_size = thread_budget()
    if batch_size <= 1 or len(items) <= 1:
        return [handler(item) for item in items]
    return asyncio.run(_process_batches(items, handler, batch_size))
