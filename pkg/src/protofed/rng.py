"""Named, counter-keyed random streams derived from one master seed.

``stream(seed, "augment", client_id, round)`` always yields the same
generator regardless of which thread asks for it or in what order, so
parallel client work stays reproducible.
"""

from __future__ import annotations

import zlib

import numpy as np


def _tag(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def stream(seed: int, name: str, *keys: int) -> np.random.Generator:
    entropy = [int(seed) & 0xFFFFFFFF, _tag(name), *(int(k) & 0xFFFFFFFF for k in keys)]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))
