"""Named random streams.

Every stream is a Philox-4x64 counter-based generator seeded from
``SeedSequence([seed, crc32(purpose), index])``, so fold shuffling,
parameter sampling and data generation draw from independent streams and
any stream can be recreated in any worker process without coordination.
"""
from __future__ import annotations

import zlib

import numpy as np

_MASK64 = (1 << 64) - 1


def stream(seed: int, purpose: str, index: int = 0) -> np.random.Generator:
    if seed < 0 or index < 0:
        raise ValueError("seed and index must be non-negative")
    tag = zlib.crc32(purpose.encode("utf-8"))
    ss = np.random.SeedSequence([seed & _MASK64, tag, index])
    return np.random.Generator(np.random.Philox(ss))
