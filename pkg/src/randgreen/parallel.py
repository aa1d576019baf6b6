"""Fixed-size chain blocks, optionally spread over forked worker processes.

Block boundaries do not depend on the worker count and results are
gathered in block order, so outputs are bit-identical for any ``workers``.
"""
from __future__ import annotations

import multiprocessing as mp
import os
from concurrent.futures import ProcessPoolExecutor

BLOCK = 1024
WORKERS_ENV = "RANDGREEN_WORKERS"

_TASK = None


def default_workers() -> int:
    try:
        return max(1, int(os.environ.get(WORKERS_ENV, "1")))
    except ValueError:
        return 1


def _run(bounds):
    return _TASK(*bounds)


def map_blocks(fn, n: int, block: int = BLOCK, workers: int = 1) -> list:
    """``[fn(a, b) for each block [a, b) of range(n)]``.

    Workers are forked so ``fn`` may be a closure; without ``fork`` support
    the blocks run sequentially.
    """
    global _TASK
    bounds = [(a, min(a + block, n)) for a in range(0, n, block)]
    if workers <= 1 or len(bounds) <= 1 or "fork" not in mp.get_all_start_methods():
        return [fn(a, b) for a, b in bounds]
    _TASK = fn
    try:
        with ProcessPoolExecutor(min(workers, len(bounds)),
                                 mp_context=mp.get_context("fork")) as ex:
            return list(ex.map(_run, bounds))
    finally:
        _TASK = None
