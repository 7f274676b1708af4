"""Named, derived random streams.

Every random draw in the library comes from ``stream(seed, component, index)``
so that a single run seed fixes all randomness and streams of different
components never overlap.
"""

from __future__ import annotations

import zlib

import numpy as np


def _component_key(component: str) -> int:
    return zlib.crc32(component.encode("utf-8"))


def stream(seed: int, component: str, *index: int) -> np.random.Generator:
    """Generator for ``(seed, component, index...)``."""
    ss = np.random.SeedSequence(int(seed), spawn_key=(_component_key(component),) + tuple(int(i) for i in index))
    return np.random.default_rng(ss)
