"""Deterministic 64-bit generator used for parameter initialization.

The generator is xorshift64* (Marsaglia's xorshift with shifts 12, 25, 27,
followed by multiplication with 0x2545F4914F6CDD1D modulo 2**64). Each
``uniform()`` draw takes the top 53 bits of one output word and scales them
into [0, 1). Seeds are mixed through one round of splitmix64 so that small
seeds (0, 1, 2, ...) give unrelated streams and a zero state never occurs.
"""

import numpy as np

_MASK = (1 << 64) - 1
_MULT = 0x2545F4914F6CDD1D


def _splitmix64(x):
    x = (x + 0x9E3779B97F4A7C15) & _MASK
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return z ^ (z >> 31)


class XorShift64Star:
    """xorshift64* stream. Not thread safe; one instance per consumer."""

    def __init__(self, seed):
        state = _splitmix64(int(seed) & _MASK)
        self.state = state or 0x9E3779B97F4A7C15

    def next_u64(self):
        x = self.state
        x ^= x >> 12
        x ^= (x << 25) & _MASK
        x ^= x >> 27
        self.state = x
        return (x * _MULT) & _MASK

    def uniform(self, low=0.0, high=1.0, size=None):
        """Uniform draws in [low, high); returns a float or a float64 array."""
        if size is None:
            u = (self.next_u64() >> 11) * (1.0 / (1 << 53))
            return low + (high - low) * u
        n = int(np.prod(size))
        raw = np.array([self.next_u64() >> 11 for _ in range(n)], dtype=np.float64)
        out = low + (high - low) * (raw * (1.0 / (1 << 53)))
        return out.reshape(size)

    def fork(self, tag):
        """Derive an independent generator keyed by an integer tag."""
        return XorShift64Star(self.next_u64() ^ _splitmix64(int(tag) & _MASK))
