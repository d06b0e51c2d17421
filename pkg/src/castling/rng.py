"""Counter-based SplitMix64 generator.

Every draw is a pure function of (seed, position in the stream), so fixtures
built from it are identical on every platform and numpy version.

Constants are the standard SplitMix64 ones:
    gamma   = 0x9E3779B97F4A7C15
    mix1    = 0xBF58476D1CE4E5B9
    mix2    = 0x94D049BB133111EB
"""

from __future__ import annotations

import numpy as np

GAMMA = 0x9E3779B97F4A7C15
MIX1 = 0xBF58476D1CE4E5B9
MIX2 = 0x94D049BB133111EB
_MASK = (1 << 64) - 1


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * np.uint64(MIX1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(MIX2)
    return z ^ (z >> np.uint64(31))


class SplitMix64:
    def __init__(self, seed: int = 0):
        self.state = int(seed) & _MASK

    def next_u64(self, n: int) -> np.ndarray:
        """Return the next ``n`` raw 64-bit outputs."""
        idx = np.arange(1, n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            z = np.uint64(self.state) + idx * np.uint64(GAMMA)
            out = _mix(z)
        self.state = (self.state + n * GAMMA) & _MASK
        return out

    def random(self, shape=()) -> np.ndarray:
        """Uniform doubles in [0, 1) with 53 random bits each."""
        n = int(np.prod(shape, dtype=np.int64)) if shape != () else 1
        u = (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        return u.reshape(shape) if shape != () else u[0]

    def uniform(self, low=0.0, high=1.0, shape=()) -> np.ndarray:
        return low + (high - low) * self.random(shape)

    def normal(self, shape=(), scale=1.0) -> np.ndarray:
        """Standard normals via Box-Muller (cosine branch only)."""
        n = int(np.prod(shape, dtype=np.int64)) if shape != () else 1
        u1 = 1.0 - self.random((n,))  # (0, 1], keeps log finite
        u2 = self.random((n,))
        z = np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)
        z = scale * z
        return z.reshape(shape) if shape != () else z[0]

    def integers(self, low: int, high: int, shape=()) -> np.ndarray:
        """Integers in [low, high). Float scaling; bias is < 2**-40 for small ranges."""
        r = self.random(shape)
        return (low + np.floor(r * (high - low))).astype(np.int64)

    def permutation(self, n: int) -> np.ndarray:
        keys = self.next_u64(n)
        return np.argsort(keys, kind="stable")

    def spawn(self) -> "SplitMix64":
        """Independent child stream seeded from this one."""
        return SplitMix64(int(self.next_u64(1)[0]))
