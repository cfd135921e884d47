"""Deterministic random number streams.

Every source of randomness in the pipeline is a counter-based Philox
stream addressed by (master seed, path). Paths mix integers and short
strings, e.g. ``stream(seed, "obs", 1234)``. Because streams are keyed
rather than sequential, generation order and worker count never change
the output.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _path_key(part) -> int:
    if isinstance(part, str):
        digest = hashlib.sha256(part.encode("utf-8")).digest()
        return int.from_bytes(digest[:4], "little")
    value = int(part)
    if value < 0:
        raise ValueError(f"stream path integers must be non-negative, got {value}")
    return value


def stream(seed: int, *path) -> np.random.Generator:
    """Return an independent generator for (seed, path)."""
    key = tuple(_path_key(p) for p in path)
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=key)
    return np.random.Generator(np.random.Philox(ss))
