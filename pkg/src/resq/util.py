"""Shared plumbing: deterministic sub-seeding and worker bounds."""
from __future__ import annotations

import hashlib
import os

import numpy as np


def subseed(master: int, *parts) -> int:
    """A stable 63-bit seed derived from a master seed and a tag path.

    Hash-based so that adding new consumers never perturbs existing
    streams, and identical across platforms and processes.
    """
    h = hashlib.sha256()
    h.update(str(int(master)).encode())
    for p in parts:
        h.update(b"/")
        h.update(str(p).encode())
    return int.from_bytes(h.digest()[:8], "little") >> 1


def rng_for(master: int, *parts) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(subseed(master, *parts)))


def worker_count() -> int:
    """Parallelism bound from RESQ_THREADS (default 1: fully serial)."""
    raw = os.environ.get("RESQ_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        return 1
    return max(1, n)
