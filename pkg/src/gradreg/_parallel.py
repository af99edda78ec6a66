"""Slab-parallel execution for per-voxel kernels.

Only elementwise work is split across threads; every reduction runs on the
reassembled array, so results are bit-identical for any thread count.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable

import numpy as np

THREADS_ENV = "GRADREG_THREADS"

# below this many voxels the pool overhead dominates
_MIN_PARALLEL = 1 << 16


def thread_count() -> int:
    raw = os.environ.get(THREADS_ENV, "").strip()
    if not raw:
        return os.cpu_count() or 1
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ValueError(f"{THREADS_ENV} must be a positive integer, got {raw!r}")
    return n


def slab_map(fn: Callable[[slice], tuple[np.ndarray, ...]], n: int, size: int) -> tuple[np.ndarray, ...]:
    """Run ``fn`` over slabs ``slice(a, b)`` of the leading axis (length ``n``).

    ``fn`` must return a tuple of arrays whose leading axis is the slab. ``size``
    is the total voxel count, used to skip threading on small problems.
    """
    threads = min(thread_count(), n)
    if threads <= 1 or size < _MIN_PARALLEL:
        return fn(slice(0, n))
    bounds = np.linspace(0, n, threads + 1).astype(int)
    slabs = [slice(a, b) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        parts = list(pool.map(fn, slabs))
    return tuple(np.concatenate([p[i] for p in parts], axis=0) for i in range(len(parts[0])))
