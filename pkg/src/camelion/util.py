"""Small runtime helpers."""

from __future__ import annotations

import os

import numpy as np

THREADS_ENV = "CAMELION_THREADS"


def worker_count() -> int:
    """Worker cap for parallel sections: CAMELION_THREADS or the CPU count."""
    raw = os.environ.get(THREADS_ENV)
    if raw:
        try:
            n = int(raw)
        except ValueError:
            n = 0
        if n >= 1:
            return n
    return os.cpu_count() or 1


def derived_seed(*parts: int) -> int:
    """Collapse a tuple of non-negative integers into one stable 64-bit seed."""
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1, np.uint64)[0])
