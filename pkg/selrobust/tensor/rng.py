"""Seeded, platform-portable randomness.

All draws come from numpy's counter-based Philox bit generator keyed by a
``SeedSequence``; independent streams are derived by spawn keys, never by
Python's ``hash()`` (which is salted per process).
"""

from __future__ import annotations

from typing import Optional, Sequence, Tuple, Union

import numpy as np

# Stream identifiers used with Rng.derive.
STREAM_INIT = 1
STREAM_SHUFFLE = 2
STREAM_DATA = 3
STREAM_CORRUPTION = 4
STREAM_BOOTSTRAP = 5

_MAX_SEED = 2**64

Size = Optional[Union[int, Tuple[int, ...]]]


class Rng:
    """Deterministic random source: identical seed and key give identical draws."""

    def __init__(self, seed: int, key: Sequence[int] = ()) -> None:
        seed = int(seed)
        if not 0 <= seed < _MAX_SEED:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
        key = tuple(int(k) for k in key)
        if any(k < 0 for k in key):
            raise ValueError(f"derivation keys must be non-negative, got {key}")
        self.seed = seed
        self.key = key
        sequence = np.random.SeedSequence(entropy=seed, spawn_key=key)
        self.generator = np.random.Generator(np.random.Philox(sequence))

    def derive(self, *keys: int) -> "Rng":
        """Independent child stream identified by ``keys`` (order matters)."""
        return Rng(self.seed, self.key + tuple(int(k) for k in keys))

    def normal(self, loc: float = 0.0, scale: float = 1.0, size: Size = None) -> np.ndarray:
        return self.generator.normal(loc, scale, size)

    def uniform(self, low: float = 0.0, high: float = 1.0, size: Size = None) -> np.ndarray:
        return self.generator.uniform(low, high, size)

    def integers(self, low: int, high: int, size: Size = None) -> np.ndarray:
        return self.generator.integers(low, high, size)

    def poisson(self, lam: Union[float, np.ndarray], size: Size = None) -> np.ndarray:
        return self.generator.poisson(lam, size)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, key={self.key})"
