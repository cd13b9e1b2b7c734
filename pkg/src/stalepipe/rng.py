"""Counter-based splitmix64 random stream.

Every stochastic choice in this package (weight init, data synthesis,
shuffling, straggler injection) flows through ``SeededRng`` so that a run is
reproducible bit-for-bit from its seeds, independent of platform or of how
draws are batched.

Update rule: draw ``i`` (0-based) of a stream with seed ``s`` is

    z = (s + (i + 1) * 0x9E3779B97F4A7C15) mod 2**64
    z ^= z >> 30;  z *= 0xBF58476D1CE4E5B9  (mod 2**64)
    z ^= z >> 27;  z *= 0x94D049BB133111EB  (mod 2**64)
    z ^= z >> 31

which is the splitmix64 generator with its state unrolled, so a vectorized
request for n draws yields exactly the same sequence as n scalar calls.
Uniform doubles use the top 53 bits: ``(z >> 11) * 2**-53``.
"""

from __future__ import annotations

import numpy as np

_GOLDEN = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB
_MASK = (1 << 64) - 1


def mix64(z: int) -> int:
    """The splitmix64 output finalizer on a 64-bit integer."""
    z &= _MASK
    z = ((z ^ (z >> 30)) * _MIX1) & _MASK
    z = ((z ^ (z >> 27)) * _MIX2) & _MASK
    return z ^ (z >> 31)


def derive_seed(seed: int, stream: int) -> int:
    """Derive an independent child seed for a named sub-stream.

    Used to give e.g. each shuffling epoch its own stream while keeping a
    single user-facing seed.
    """
    return mix64((seed & _MASK) + _GOLDEN * (stream + 1))


class SeededRng:
    """Deterministic stream of uniforms, normals and permutations."""

    def __init__(self, seed: int):
        self.seed = seed & _MASK
        self.counter = 0

    def _raw(self, n: int) -> np.ndarray:
        idx = np.arange(self.counter + 1, self.counter + n + 1, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            z = np.uint64(self.seed) + idx * np.uint64(_GOLDEN)
            z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
            z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
            z = z ^ (z >> np.uint64(31))
        return z

    def next_u64(self) -> int:
        return int(self._raw(1)[0])

    def uniform(self, n: int, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        u = (self._raw(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        return low + (high - low) * u

    def normal(self, n: int) -> np.ndarray:
        """Standard normals via Box-Muller on consecutive uniform pairs."""
        pairs = (n + 1) // 2
        u = (self._raw(2 * pairs) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        u1 = u[0::2]
        u2 = u[1::2]
        u1 = np.where(u1 == 0.0, 2.0**-53, u1)  # log(0) guard, deterministic
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        out = np.empty(2 * pairs)
        out[0::2] = r * np.cos(theta)
        out[1::2] = r * np.sin(theta)
        return out[:n]

    def permutation(self, n: int) -> np.ndarray:
        """Permutation of range(n) by stable argsort of one u64 key per slot."""
        keys = self._raw(n)
        return np.argsort(keys, kind="stable")
