"""
Counter-based seed schedule.

A single global seed fans out into independent, replayable streams keyed by a
purpose tag and the coordinates that use the stream (tree id, node path, client id).
Each stream is a Philox generator whose 128-bit key is the SHA-256 digest of the
canonical key tuple, so no stream depends on the order other streams were consumed in.
"""
import hashlib
from typing import Union

import numpy as np
from scipy.special import ndtri

Key = Union[int, str]

_TWO_53 = float(2 ** 53)


def derive_key(seed: int, purpose: str, *coords: Key) -> int:
    """128-bit integer key for (seed, purpose, coords)"""
    text = "|".join([str(int(seed)), purpose] + [f"{type(c).__name__}:{c}" for c in coords])
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:16], "big")


def rng_for(seed: int, purpose: str, *coords: Key) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=derive_key(seed, purpose, *coords)))


def open_uniform(rng: np.random.Generator, size) -> np.ndarray:
    """Uniforms strictly inside (0, 1) built from 53-bit integers"""
    draws = rng.integers(0, 2 ** 53, size=size, dtype=np.int64)
    return (draws.astype(np.float64) + 0.5) / _TWO_53


def standard_normal(rng: np.random.Generator, size) -> np.ndarray:
    # inverse-CDF transform; identical uniforms give identical normals on any platform
    return ndtri(open_uniform(rng, size))
