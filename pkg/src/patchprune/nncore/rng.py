"""Seeded randomness with stable, independent child streams.

Every stochastic stage of the pipeline (init, data synthesis, batch order,
random pruning) pulls from its own named child of one root seed. Child seeds
are derived by hashing ``(root_seed, tag)``, so adding a new consumer never
shifts the draws of existing ones, and the same tag always reproduces the
same stream.
"""

from __future__ import annotations

import hashlib

import numpy as np

__all__ = ["SeededRng"]


class SeededRng:
    """A PCG64 generator bound to a seed, with hash-derived named children."""

    def __init__(self, seed: int) -> None:
        self.seed = int(seed)
        self.gen = np.random.Generator(np.random.PCG64(self.seed))

    def child(self, tag: str) -> "SeededRng":
        digest = hashlib.sha256(f"{self.seed}:{tag}".encode()).digest()
        return SeededRng(int.from_bytes(digest[:8], "little"))

    # Thin wrappers so call sites read as rng.<draw> without reaching for .gen.

    def normal(self, scale: float, shape) -> np.ndarray:
        return self.gen.normal(0.0, scale, size=shape).astype(np.float32)

    def uniform(self, low: float, high: float, shape) -> np.ndarray:
        return self.gen.uniform(low, high, size=shape).astype(np.float32)

    def integers(self, low: int, high: int, size=None):
        return self.gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self.gen.permutation(n)

    def shuffle(self, x) -> None:
        self.gen.shuffle(x)
