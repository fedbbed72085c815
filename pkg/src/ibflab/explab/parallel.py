"""Replicate fan-out.

Work is split into contiguous replicate-id chunks; every chunk's streams
derive from (master seed, absolute replicate id), so results are identical
whatever the worker count.  IBF_THREADS caps the process pool; unset or 1
runs the chunks in-process (the linear algebra already uses the machine's
cores through BLAS).
"""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor


def worker_count() -> int:
    env = os.environ.get("IBF_THREADS", "").strip()
    if env:
        return max(1, int(env))
    return 1


def run_chunked(fn, total: int, chunk_size: int, workers: int | None = None):
    """Evaluate fn(offset, count) over replicate chunks, in order.

    Returns the list of chunk results in offset order.  fn must be a
    picklable module-level callable when workers > 1.
    """
    if workers is None:
        workers = worker_count()
    chunks = [
        (lo, min(chunk_size, total - lo)) for lo in range(0, total, chunk_size)
    ]
    if workers <= 1 or len(chunks) == 1:
        return [fn(lo, cnt) for lo, cnt in chunks]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(fn, lo, cnt) for lo, cnt in chunks]
        return [f.result() for f in futures]
