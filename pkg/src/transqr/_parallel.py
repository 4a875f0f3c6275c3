"""Order-stable parallel map bounded by the TRANSQR_THREADS environment variable."""

import os
from concurrent.futures import ProcessPoolExecutor


def worker_count(requested: int | None = None) -> int:
    if requested is None:
        env = os.environ.get("TRANSQR_THREADS", "").strip()
        if env:
            try:
                requested = int(env)
            except ValueError:
                raise ValueError(f"TRANSQR_THREADS must be an integer, got {env!r}") from None
        else:
            requested = os.cpu_count() or 1
    return max(1, int(requested))


def ordered_map(fn, items, workers: int | None = None) -> list:
    """``[fn(x) for x in items]``, run in worker processes when more than one is allowed.

    Results come back in input order regardless of completion order. ``fn``
    must be picklable (a module-level function or a functools.partial of one).
    """
    items = list(items)
    w = min(worker_count(workers), len(items))
    if w <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=w) as ex:
        return list(ex.map(fn, items))
