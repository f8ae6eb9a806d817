"""Process-wide worker-pool cache for the data-parallel kernels.

Pools are keyed by worker count and live for the process; creating a pool
per call would dominate the small kernels these back (per-level triangular
solves, row-partitioned SpMV, slot-partitioned compression).
"""

from __future__ import annotations

import threading
from concurrent.futures import ThreadPoolExecutor

_pools: dict[int, ThreadPoolExecutor] = {}
_lock = threading.Lock()


def worker_pool(workers: int) -> ThreadPoolExecutor:
    pool = _pools.get(workers)
    if pool is None:
        with _lock:
            pool = _pools.get(workers)
            if pool is None:
                pool = ThreadPoolExecutor(max_workers=workers, thread_name_prefix=f"tetsim{workers}")
                _pools[workers] = pool
    return pool
