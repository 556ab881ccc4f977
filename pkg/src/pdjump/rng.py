"""Counter-style seed derivation for chunked, thread-count independent sampling."""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Sequence

import numpy as np
from numpy.random import Generator, Philox, SeedSequence


def chunk_rng(seed: int, *key: int) -> Generator:
    """Generator for the chunk addressed by ``key`` under the root ``seed``.

    The stream depends only on ``(seed, key)``, never on how many workers
    run or in which order, so any batch can be regenerated in isolation.
    """
    return Generator(Philox(SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in key))))


def chunk_slices(n: int, chunk_size: int) -> list[slice]:
    return [slice(i, min(i + chunk_size, n)) for i in range(0, n, chunk_size)]


def run_chunks(fn: Callable[[int, slice], object], n: int, chunk_size: int, threads: int = 1) -> list:
    """Evaluate ``fn(chunk_index, slice)`` over all chunks, in chunk order."""
    slices = chunk_slices(n, chunk_size)
    if threads <= 1 or len(slices) == 1:
        return [fn(i, s) for i, s in enumerate(slices)]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda a: fn(*a), enumerate(slices)))


def spawn_seeds(seed: int, n: int) -> Sequence[int]:
    """Independent integer seeds, e.g. for per-experiment sub-streams."""
    return [int(s.generate_state(1)[0]) for s in SeedSequence(seed).spawn(n)]
