"""Portable, splittable random streams.

Algorithm (version ``RNG_ALGORITHM``):

* bit source: PCG64 (128-bit LCG state, XSL-RR output) as shipped by numpy,
  seeded through ``numpy.random.SeedSequence``. Both have frozen, documented
  output streams across numpy releases.
* streams are split by key: ``Rng(seed).derive("cluster", 3)`` appends the
  CRC-32 of each string key (ints are used as-is) to the SeedSequence spawn
  key, so a child stream depends only on (seed, key path).
* every variate is built from raw 64-bit words with IEEE-754 +, -, * only:
  uniform doubles take the top 53 bits, integers floor ``u * n``, and
  "normal" variates are the centred sum of 12 uniforms (Irwin-Hall, unit
  variance). No libm calls, so streams are bit-identical on any platform.

numpy's ``Generator`` distribution methods carry no cross-version guarantee,
which is why they are not used.
"""

from __future__ import annotations

import zlib
from typing import Sequence

import numpy as np

RNG_ALGORITHM = "pcg64-seedseq-crc32key/u53-irwinhall12/v1"

_TWO_M53 = 1.0 / 9007199254740992.0


def _key_int(key: int | str) -> int:
    if isinstance(key, str):
        return zlib.crc32(key.encode("utf-8"))
    if isinstance(key, (int, np.integer)) and key >= 0:
        return int(key)
    raise ValueError(f"stream keys must be str or non-negative int, got {key!r}")


class Rng:
    """Keyed PCG64 stream with platform-independent variates."""

    def __init__(self, seed: int = 0, _key: tuple[int, ...] = ()):
        self.seed = int(seed)
        self.key = tuple(_key)
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=self.key)
        self._bits = np.random.PCG64(ss)

    def derive(self, *keys: int | str) -> "Rng":
        """Independent child stream addressed by ``keys``."""
        return Rng(self.seed, self.key + tuple(_key_int(k) for k in keys))

    def raw(self, n: int) -> np.ndarray:
        return self._bits.random_raw(int(n)).astype(np.uint64, copy=False)

    def uniform(self, low: float = 0.0, high: float = 1.0, size=None):
        """Uniform on ``[low, high)``; scalar when ``size`` is None."""
        n = 1 if size is None else int(np.prod(size))
        u = (self.raw(n) >> np.uint64(11)).astype(np.float64) * _TWO_M53
        out = low + (high - low) * u
        if size is None:
            return float(out[0])
        return out.reshape(size)

    def normal(self, size) -> np.ndarray:
        n = int(np.prod(size))
        u = self.uniform(size=(12, n))
        acc = u[0].copy()
        for row in u[1:]:
            acc += row
        return (acc - 6.0).reshape(size)

    def integers(self, n: int, size=None):
        """Uniform integers in ``[0, n)``."""
        if n <= 0:
            raise ValueError("n must be positive")
        u = self.uniform(size=1 if size is None else size)
        out = np.minimum(np.floor(u * n).astype(np.int64), n - 1)
        if size is None:
            return int(out[0])
        return out

    def choice(self, p: np.ndarray, size: int) -> np.ndarray:
        """Indices drawn independently with probabilities ``p`` (need not be normalised)."""
        cdf = np.cumsum(np.asarray(p, dtype=np.float64))
        total = cdf[-1]
        if not total > 0:
            raise ValueError("weights must have positive sum")
        u = self.uniform(size=int(size)) * total
        idx = np.searchsorted(cdf, u, side="right")
        return np.minimum(idx, len(cdf) - 1)

    def permutation(self, n: int) -> np.ndarray:
        # argsort of raw words; ties have probability ~n^2 / 2^64
        return np.argsort(self.raw(n), kind="stable")

    def sample_without_replacement(self, n: int, k: int) -> np.ndarray:
        if k > n:
            raise ValueError("k > n")
        return self.permutation(n)[:k]

    def state_digest(self) -> str:
        return f"{RNG_ALGORITHM}:{self.seed}:{','.join(map(str, self.key))}"


def as_rng(rng: Rng | int | None, *keys: int | str) -> Rng:
    if rng is None:
        rng = Rng(0)
    elif not isinstance(rng, Rng):
        rng = Rng(int(rng))
    return rng.derive(*keys) if keys else rng


def spawn(rng: Rng, names: Sequence[str]) -> dict[str, Rng]:
    return {name: rng.derive(name) for name in names}
