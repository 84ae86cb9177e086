"""Seed derivation and order-preserving parallel map."""
from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = ["seed_split", "seed_split_array", "default_threads", "parallel_map"]

_MASK = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15


def _mix64(z: int) -> int:
    z &= _MASK
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return z ^ (z >> 31)


def seed_split(master: int, index: int) -> int:
    """64-bit seed for replication ``index`` under ``master``.

    Counter mode: the index enters through ``key + (index + 1) * gamma`` mod
    2^64 (a bijection in ``index`` since gamma is odd) followed by the
    splitmix64 finalizer, which is itself a bijection of 64-bit words.  So
    distinct indices below 2^64 always give distinct seeds.
    """
    if index < 0:
        raise ValueError("replication index must be nonnegative")
    key = _mix64(int(master) & _MASK)
    return _mix64(key + ((int(index) + 1) * _GAMMA))


def seed_split_array(master: int, indices) -> np.ndarray:
    """Vectorized :func:`seed_split` for an integer array of indices."""
    idx = np.asarray(indices, dtype=np.uint64)
    key = np.uint64(_mix64(int(master) & _MASK))
    with np.errstate(over="ignore"):
        z = key + (idx + np.uint64(1)) * np.uint64(_GAMMA)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        return z ^ (z >> np.uint64(31))


def default_threads() -> int:
    env = os.environ.get("MANYSERVER_THREADS")
    if env:
        try:
            return max(int(env), 1)
        except ValueError:
            pass
    return 1


def _call_chunk(args):
    fn, chunk = args
    return [fn(item) for item in chunk]


def parallel_map(fn: Callable, items: Sequence, threads: int | None = None,
                 chunksize: int | None = None) -> list:
    """``[fn(x) for x in items]`` computed on ``threads`` worker processes.

    Results always come back in input order, so output does not depend on
    the number of workers.  ``fn`` must be picklable (a module-level
    function or a ``functools.partial`` of one).
    """
    items = list(items)
    threads = default_threads() if threads is None else max(int(threads), 1)
    if threads == 1 or len(items) <= 1:
        return [fn(x) for x in items]
    if chunksize is None:
        chunksize = max(1, len(items) // (4 * threads))
    chunks = [items[i:i + chunksize] for i in range(0, len(items), chunksize)]
    with ProcessPoolExecutor(max_workers=threads) as pool:
        parts = pool.map(_call_chunk, [(fn, c) for c in chunks])
        return [r for part in parts for r in part]
