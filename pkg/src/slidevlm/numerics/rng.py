"""Deterministic, splittable random streams.

Every source of randomness in the repo draws from a named Philox stream
derived from (root seed, path). Philox is counter-based, so streams with
different paths are independent and a run is byte-reproducible from its
seed alone.
"""

from __future__ import annotations

import hashlib

import numpy as np

__all__ = ["stream"]


def stream(seed: int, *path) -> np.random.Generator:
    """Return the generator for `path` under `seed`.

    The same (seed, path) always yields the same stream; distinct paths
    yield statistically independent streams.
    """
    label = "/".join(str(p) for p in path)
    digest = hashlib.sha256(label.encode("utf-8")).digest()
    words = [int.from_bytes(digest[i : i + 4], "little") for i in range(0, 16, 4)]
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF, *words]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))
