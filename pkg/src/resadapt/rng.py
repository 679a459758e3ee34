"""Counter-based 64-bit PRNG (SplitMix64 in counter mode).

Output ``i`` of stream ``seed`` is ``mix(seed + (i + 1) * GOLDEN)`` modulo 2**64,
which is bit-for-bit the classic sequential SplitMix64 sequence.  Because
every draw is a pure function of ``(seed, counter)`` the synthetic data and
shuffles it produces are identical across platforms and languages.

Derived quantities use fixed recipes:

* uniform doubles: ``(u >> 11) * 2**-53``
* normals: Box-Muller on consecutive uniform pairs ``(u1, u2)`` with
  ``r = sqrt(-2 ln(1 - u1))``, emitting ``r cos(2 pi u2)`` then ``r sin(2 pi u2)``
* permutations: stable argsort of one u64 key per element
"""
from __future__ import annotations

import numpy as np

GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_MASK = (1 << 64) - 1


def mix64(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * _M1
        z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def derive_seed(seed: int, *keys: int) -> int:
    """Fold integer keys into a seed to obtain an independent stream id."""
    s = int(seed) & _MASK
    for k in keys:
        s = int(mix64(np.array([(s ^ (int(k) & _MASK)) + 0x9E3779B97F4A7C15 & _MASK], dtype=np.uint64))[0])
    return s


class CounterRNG:
    def __init__(self, seed: int, counter: int = 0):
        self.seed = int(seed) & _MASK
        self.counter = int(counter)

    def u64(self, n: int) -> np.ndarray:
        idx = np.arange(self.counter + 1, self.counter + 1 + n, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            state = np.uint64(self.seed) + idx * GOLDEN
        return mix64(state)

    def uniform(self, n: int) -> np.ndarray:
        return (self.u64(n) >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)

    def normal(self, n: int) -> np.ndarray:
        pairs = (n + 1) // 2
        u = self.uniform(2 * pairs).reshape(pairs, 2)
        r = np.sqrt(-2.0 * np.log1p(-u[:, 0]))
        theta = 2.0 * np.pi * u[:, 1]
        z = np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1).reshape(-1)
        return z[:n]

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.u64(n), kind="stable")

    def bernoulli_keep(self, shape, keep: float) -> np.ndarray:
        size = int(np.prod(shape))
        return (self.uniform(size) < keep).reshape(shape)
