"""Worker-pool helpers.

Parallelism only ever fans out across whole items (images); results are
collected back in submission order, so outputs are byte-identical for
any worker count. The ASLAB_THREADS environment variable caps the pool.
"""

import os
from concurrent.futures import ThreadPoolExecutor

from .errors import ConfigError


def worker_count(requested: int | None = None) -> int:
    """Effective worker count: ``requested`` (default 1) capped by the
    ASLAB_THREADS environment variable when it is set."""
    cap = os.environ.get("ASLAB_THREADS")
    n = 1 if requested is None else int(requested)
    if n < 1:
        raise ConfigError(f"worker count must be >= 1, got {n}")
    if cap is not None:
        try:
            cap_n = int(cap)
        except ValueError as exc:
            raise ConfigError(f"ASLAB_THREADS={cap!r} is not an integer") from exc
        if cap_n < 1:
            raise ConfigError(f"ASLAB_THREADS must be >= 1, got {cap_n}")
        n = min(n, cap_n) if requested is not None else cap_n
    return n


def parallel_map_ordered(fn, items, workers: int | None = None) -> list:
    """Map ``fn`` over ``items``, preserving item order in the result.

    With one worker this is a plain loop. With more, a thread pool is
    used (numpy releases the GIL in its kernels) and results are still
    returned in input order, never in completion order.
    """
    n = worker_count(workers)
    items = list(items)
    if n <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))
