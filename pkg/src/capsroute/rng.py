"""Deterministic random streams.

Every random choice in the library flows from one 64-bit seed.  Each
consumer asks for a named substream; the name is hashed with crc32 (stable
across processes, unlike ``hash()``), so adding a new consumer never
perturbs the draws of an existing one.
"""

import zlib

import numpy as np


def substream(seed: int, label: str) -> np.random.Generator:
    """Generator for the (seed, label) substream."""
    return np.random.default_rng(
        np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, zlib.crc32(label.encode("utf-8"))])
    )


def substream_int(seed: int, label: str, index: int = 0) -> int:
    """Stable 63-bit integer derived from a substream, e.g. a per-epoch shuffle seed."""
    vals = substream(seed, label).integers(0, 2**63 - 1, size=index + 1)
    return int(vals[index])
