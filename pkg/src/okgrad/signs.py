"""
Random sign sources

Every stochastic routine in okgrad draws its randomness through an object with a
``signs(k)`` method. Production code uses SignStream, a counter-based Philox stream
keyed by (seed, lane, salt) so batch lanes are reproducible no matter which worker
runs them. Tests and oracles swap in ScriptedSigns / CountingSigns to enumerate every
outcome of a sampler exhaustively.
"""

import itertools

import numpy as np

from okgrad.errors import EnumerationError

MAX_ENUMERATION_BITS = 16


class SignStream:
    """Counter-based random stream for one (seed, lane, salt) key"""

    def __init__(self, seed, lane=0, salt=0):
        self.key = (int(seed), int(lane), int(salt))
        self._gen = np.random.Generator(np.random.Philox(np.random.SeedSequence(list(self.key))))

    def signs(self, k):
        if k <= 0:
            return np.empty(0)
        return np.where(self._gen.integers(0, 2, size=k) == 1, 1.0, -1.0)

    def bits(self, k):
        return self._gen.integers(0, 2, size=k)

    def uniform(self, size=None):
        return self._gen.random(size)

    def integers(self, low, high, size=None):
        # high is exclusive
        return self._gen.integers(low, high, size=size)

    def normal(self, scale=1.0, size=None):
        return self._gen.normal(0.0, scale, size)


class ScriptedSigns:
    """Replays a fixed sequence of +-1 values, in order"""

    def __init__(self, values):
        self.values = [float(v) for v in values]
        self.pos = 0

    def signs(self, k):
        if self.pos + k > len(self.values):
            raise IndexError(f"scripted signs exhausted: need {k}, have {len(self.values) - self.pos}")
        out = np.asarray(self.values[self.pos:self.pos + k], dtype=float)
        self.pos += k
        return out

    @property
    def exhausted(self):
        return self.pos == len(self.values)


class CountingSigns:
    """Returns +1 for every draw and counts how many were requested"""

    def __init__(self):
        self.count = 0

    def signs(self, k):
        self.count += max(int(k), 0)
        return np.ones(max(int(k), 0))


def count_signs(sampler):
    """Number of signs ``sampler(rng)`` consumes (assumed independent of the draws)"""
    counter = CountingSigns()
    sampler(counter)
    return counter.count


def sign_patterns(count, max_bits=MAX_ENUMERATION_BITS):
    """All 2**count sign vectors, each equally likely"""
    if count > max_bits:
        raise EnumerationError(f"enumeration of 2^{count} outcomes exceeds 2^{max_bits}")
    return itertools.product((1.0, -1.0), repeat=count)
