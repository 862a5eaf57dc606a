"""Deterministic random number streams.

All randomness in the package flows through :class:`Rng`, a thin wrapper
around numpy's PCG64 bit generator keyed by a ``SeedSequence``. Both are
covered by numpy's stream-compatibility guarantee, so an identical seed
produces an identical stream on every platform. Derived streams
(``child``) are keyed by spawn keys and are statistically independent of
the parent and of each other.
"""

from __future__ import annotations

import numpy as np


class Rng:
    """A seeded random stream with deterministic child-stream derivation."""

    def __init__(self, seed: int, _key: tuple[int, ...] = ()):
        self.seed = int(seed)
        self.key = tuple(int(k) for k in _key)
        ss = np.random.SeedSequence(self.seed, spawn_key=self.key)
        self.generator = np.random.Generator(np.random.PCG64(ss))

    def child(self, *ids: int) -> "Rng":
        """Independent stream keyed by this stream's key extended by `ids`."""
        return Rng(self.seed, self.key + tuple(ids))

    def normal(self, shape=None, loc=0.0, scale=1.0, dtype=np.float32):
        out = self.generator.normal(loc, scale, size=shape)
        return out.astype(dtype, copy=False) if shape is not None else dtype(out)

    def uniform(self, low=0.0, high=1.0, shape=None, dtype=np.float32):
        out = self.generator.uniform(low, high, size=shape)
        return out.astype(dtype, copy=False) if shape is not None else float(out)

    def integers(self, low, high=None, shape=None):
        return self.generator.integers(low, high, size=shape)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)

    def __repr__(self):
        return f"Rng(seed={self.seed}, key={self.key})"


def derive_seed(master_seed: int, *key: int) -> int:
    """Fold a (master seed, key path) pair into a reproducible 64-bit seed.

    Used to stamp per-clip seeds into dataset manifests: the derived value
    alone reproduces the clip. Distinct key paths give distinct streams.
    """
    state = np.random.SeedSequence(int(master_seed), spawn_key=tuple(int(k) for k in key))
    lo, hi = state.generate_state(2, np.uint64)[:2]
    return int(lo ^ (hi << np.uint64(1))) & ((1 << 63) - 1)
