"""Portable seeded random number generation for reproducible fixtures.

The generator is splitmix64 used in counter mode: output i (1-based) is
``mix(seed + i * GAMMA)`` with the standard constants

    GAMMA = 0x9E3779B97F4A7C15
    M1    = 0xBF58476D1CE4E5B9
    M2    = 0x94D049BB133111EB

so a stream is a pure function of (seed, draw position) and identical across
runs and languages. Gaussians come from Box-Muller on the raw 53-bit
uniforms rather than any platform library, keeping the draw sequence pinned.
"""

import numpy as np

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_U64_MASK = (1 << 64) - 1
_INV_2_53 = float(2.0**-53)


def _mix64(z: np.ndarray) -> np.ndarray:
    """splitmix64 finalizer on a uint64 array (wrapping arithmetic)."""
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


class SplitMix64:
    """Sequential splitmix64 stream with vectorized draws.

    Draw order is part of the contract: callers that document their draw
    sequence (counts and order of raw/uniform/gaussian calls) get bitwise
    reproducible output for a given seed.
    """

    def __init__(self, seed: int):
        self._seed = np.uint64(seed & _U64_MASK)
        self._drawn = 0

    def raw(self, count: int) -> np.ndarray:
        """Next `count` raw 64-bit outputs as a uint64 array."""
        if count < 0:
            raise ValueError("count must be >= 0")
        idx = np.arange(self._drawn + 1, self._drawn + count + 1, dtype=np.uint64)
        self._drawn += count
        return _mix64(self._seed + idx * _GAMMA)

    def uniforms(self, count: int) -> np.ndarray:
        """Next `count` float64 uniforms in [0, 1), 53-bit resolution."""
        return (self.raw(count) >> np.uint64(11)).astype(np.float64) * _INV_2_53

    def gaussians(self, count: int) -> np.ndarray:
        """Next `count` standard normals via Box-Muller.

        Consumes 2*ceil(count/2) raw draws: pair (u1, u2) yields
        r*cos(2*pi*u2) then r*sin(2*pi*u2) with r = sqrt(-2*ln(u1)) and
        u1 mapped into (0, 1] so the log is finite.
        """
        if count < 0:
            raise ValueError("count must be >= 0")
        pairs = (count + 1) // 2
        bits = self.raw(2 * pairs)
        u1 = ((bits[0::2] >> np.uint64(11)) + np.uint64(1)).astype(np.float64) * _INV_2_53
        u2 = (bits[1::2] >> np.uint64(11)).astype(np.float64) * _INV_2_53
        r = np.sqrt(-2.0 * np.log(u1))
        theta = (2.0 * np.pi) * u2
        out = np.empty(2 * pairs, dtype=np.float64)
        out[0::2] = r * np.cos(theta)
        out[1::2] = r * np.sin(theta)
        return out[:count]
