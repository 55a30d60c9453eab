"""Deterministic random-stream derivation shared by every pipeline stage.

All randomness in the package flows through PCG64 generators keyed by an
integer tuple via ``numpy.random.SeedSequence``. Labelled stream constants
keep independent purposes (concept sampling, record noise, batch order, ...)
from ever colliding when they are derived from one user-facing seed.
"""

from __future__ import annotations

import hashlib

import numpy as np

# Stream labels. Changing any of these changes every derived artifact, so
# they are part of the on-disk compatibility contract.
STREAM_CONCEPTS = 1
STREAM_RECORDS = 2
STREAM_MIX = 3
STREAM_MODEL_INIT = 4
STREAM_BATCH_ORDER = 5
STREAM_AUGMENT = 6
STREAM_RESERVOIR = 7
STREAM_SHIFT = 8


def make_rng(*entropy: int) -> np.random.Generator:
    """PCG64 generator keyed by an integer tuple.

    ``make_rng(seed, stream, index)`` yields the same stream on every
    platform numpy supports, which is what makes shards, checkpoints and
    reports byte-reproducible.
    """
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(list(entropy))))


def digest64(data: bytes) -> int:
    """First 8 bytes of sha256(data), little-endian unsigned."""
    return int.from_bytes(hashlib.sha256(data).digest()[:8], "little")
