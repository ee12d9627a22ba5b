"""Named random sub-streams derived from one integer seed."""
from __future__ import annotations

import zlib

import numpy as np


def rng_for(seed: int, stream: str) -> np.random.Generator:
    """Independent generator for ``stream`` (e.g. ``"data"``, ``"init"``, ``"decode"``)."""
    return np.random.default_rng([int(seed) & 0xFFFFFFFF, zlib.crc32(stream.encode())])
