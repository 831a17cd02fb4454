"""Deterministic named RNG substreams.

Every random draw in the package flows from a single user seed through a
named substream, so independent pipeline stages stay decoupled: adding a
draw to one stage never shifts the randomness of another.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _name_key(name: str) -> int:
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def substream(seed: int, name: str) -> np.random.Generator:
    """Return a Generator for the (seed, name) substream.

    Same (seed, name) always yields an identical stream; different names
    under the same seed are statistically independent.
    """
    return np.random.default_rng(np.random.SeedSequence([int(seed), _name_key(name)]))
