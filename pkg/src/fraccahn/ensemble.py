"""Deterministic parallel ensembles.

Work is split into fixed-size index chunks whose boundaries do not depend on the
worker count. Each chunk is a pure function of (seed, chunk indices, config), and
chunk results are merged in index order. Serial and parallel runs are therefore
element-wise identical.
"""
from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from typing import Callable

import numpy as np

CHUNK = 250


def chunk_bounds(n: int, size: int = CHUNK) -> list[tuple[int, int]]:
    return [(a, min(a + size, n)) for a in range(0, n, size)]


def run_chunks(fn: Callable, n: int, args: tuple = (), workers: int = 1, size: int = CHUNK) -> list:
    """[fn(start, stop, *args) for each chunk], in chunk order."""
    bounds = chunk_bounds(n, size)
    if workers <= 1 or len(bounds) <= 1:
        return [fn(a, b, *args) for a, b in bounds]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(fn, a, b, *args) for a, b in bounds]
        return [f.result() for f in futures]


def concat(results: list, key: str | None = None) -> np.ndarray:
    parts = [r[key] for r in results] if key is not None else results
    return np.concatenate(parts, axis=0)
