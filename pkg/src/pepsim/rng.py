"""Counter-based random streams.

Every random draw in the package comes from a Philox generator whose key is
derived from ``(master_seed, label)`` and whose counter is positioned at a
block index. A block (a chunk of Monte Carlo samples, or one time slice of a
run) therefore always sees the same numbers no matter which worker handles
it, or how many workers there are.
"""

from __future__ import annotations

import hashlib
import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np

MAX_SEED = 2**64 - 1
THREADS_ENV = "PEPSIM_THREADS"


def stream_key(seed: int, label: str) -> np.ndarray:
    if not 0 <= int(seed) <= MAX_SEED:
        raise ValueError(f"seed must be an unsigned 64-bit integer, got {seed}")
    digest = hashlib.sha256(label.encode("utf-8")).digest()
    label_words = [int.from_bytes(digest[i : i + 4], "little") for i in range(0, 16, 4)]
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFF, int(seed) >> 32, *label_words])
    return ss.generate_state(2, dtype=np.uint64)


def block_generator(seed: int, label: str, block: int) -> np.random.Generator:
    """Generator for block ``block`` of the stream named ``label``."""
    if block < 0:
        raise ValueError("block index must be non-negative")
    counter = np.array([0, 0, block, 0], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=stream_key(seed, label), counter=counter))


def worker_count(requested: int | None = None) -> int:
    """Number of worker threads, capped by the PEPSIM_THREADS environment variable."""
    n = requested if requested is not None else (os.cpu_count() or 1)
    cap = os.environ.get(THREADS_ENV)
    if cap:
        n = min(n, max(1, int(cap)))
    return max(1, int(n))


def map_blocks(fn, blocks, workers: int | None = None) -> list:
    """Apply ``fn`` to each block index; results come back in block order."""
    blocks = list(blocks)
    n = min(worker_count(workers), max(1, len(blocks)))
    if n == 1:
        return [fn(b) for b in blocks]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, blocks))
