"""Deterministic parallel execution over independent realizations.

Realization ``i`` always draws from ``realization_rng(master_seed, i)``, so the
merged output does not depend on how indices are split between workers.
"""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from typing import Callable, Sequence

import numpy as np


def realization_rng(master_seed: int, index: int) -> np.random.Generator:
    seq = np.random.SeedSequence(int(master_seed), spawn_key=(int(index),))
    return np.random.Generator(np.random.PCG64(seq))


def default_workers() -> int:
    return max(1, len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else os.cpu_count() or 1)


def split_range(n: int, n_chunks: int) -> list[tuple[int, int]]:
    n_chunks = max(1, min(n_chunks, n))
    edges = np.linspace(0, n, n_chunks + 1).round().astype(int)
    return [(int(a), int(b)) for a, b in zip(edges[:-1], edges[1:]) if b > a]


def run_chunked(func: Callable, n: int, args: Sequence, workers: int = 1, chunks_per_worker: int = 4,
                first_index: int = 0):
    """Call ``func(start, stop, *args)`` over [first_index, first_index + n), results in index order."""
    workers = max(1, int(workers))
    if workers == 1 or n < 2:
        return [func(first_index, first_index + n, *args)]
    ranges = [(first_index + a, first_index + b) for a, b in split_range(n, workers * chunks_per_worker)]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(func, a, b, *args) for a, b in ranges]
        return [f.result() for f in futures]
