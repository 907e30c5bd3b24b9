"""Deterministic random stream derivation.

Every source of randomness in a run derives from a single user seed plus a
stream name: ``stream(seed, name)`` seeds a fresh ``numpy`` generator with
``SeedSequence([seed, crc32(name)])``. Distinct names give independent
streams; the same (seed, name) pair always reproduces the same draws.
"""

from __future__ import annotations

import zlib

import numpy as np


def stream(seed: int, name: str) -> np.random.Generator:
    key = zlib.crc32(name.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence([int(seed), key]))
