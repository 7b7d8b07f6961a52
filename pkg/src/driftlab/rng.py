"""Counter-based random streams.

Every random quantity in a run is drawn from a stream addressed by a tuple of
integer ids (tag, replica, system, site key, particle index, ...) hashed
together with the run seed.  Two properties matter:

* identical (seed, ids) always give the identical draw sequence, independent
  of scheduling order or backend;
* the compiled kernel re-implements exactly the same integer arithmetic, so
  Python and C backends produce bit-identical runs.

The generator is splitmix64; distributions are inverse-CDF / rejection forms
chosen so that both backends perform the same floating point operations in
the same order.
"""
from __future__ import annotations

import math

MASK64 = (1 << 64) - 1
GOLD = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB
_INV53 = 1.0 / 9007199254740992.0  # 2^-53

# Stream tags.  The compiled kernel hardcodes the same values.
TAG_INIT = 1       # per-site initial Poisson counts
TAG_WALK = 2       # per-particle jump/holding stream
TAG_THIN = 3       # per-site binomial thinning for the monotone coupling
TAG_SITEKEY = 4    # coordinate hashing


def mix64(z: int) -> int:
    """splitmix64 output finalizer on a 64-bit word."""
    z &= MASK64
    z = ((z ^ (z >> 30)) * _MIX1) & MASK64
    z = ((z ^ (z >> 27)) * _MIX2) & MASK64
    return (z ^ (z >> 31)) & MASK64


def derive(seed: int, ids) -> int:
    """Hash (seed, ids) into a stream state.

    The +GOLD step before each mix keeps 0 from being a fixed point.
    """
    s = mix64((seed + GOLD) & MASK64)
    for q in ids:
        s = (s ^ ((q & MASK64) * GOLD)) & MASK64
        s = mix64((s + GOLD) & MASK64)
    return s


def site_key(coords) -> int:
    """Window-independent 64-bit key of a lattice site."""
    return derive(TAG_SITEKEY, coords)


class Stream:
    """One splitmix64 stream; the RandomSource of the engine contract.

    `seed` and the id tuple fully determine the draw sequence.
    """

    __slots__ = ("state", "seed", "ids")

    def __init__(self, seed: int, ids=()):
        self.seed = seed & MASK64
        self.ids = tuple(int(q) for q in ids)
        self.state = derive(self.seed, self.ids)

    def next_u64(self) -> int:
        self.state = (self.state + GOLD) & MASK64
        return mix64(self.state)

    def u01(self) -> float:
        """Uniform in [0, 1), 53-bit resolution."""
        return (self.next_u64() >> 11) * _INV53

    def expo(self) -> float:
        """Exponential(1) via inverse CDF; argument of log is in (0, 1]."""
        return -math.log(1.0 - self.u01())

    def poisson(self, lam: float) -> int:
        """Knuth product method; fine for the desk-scale rates used here."""
        if lam <= 0.0:
            return 0
        limit = math.exp(-lam)
        k = 0
        p = 1.0
        while True:
            p *= self.u01()
            if p <= limit:
                return k
            k += 1

    def binomial(self, n: int, q: float) -> int:
        c = 0
        for _ in range(n):
            if self.u01() < q:
                c += 1
        return c

    def jump_index(self, cdf) -> int:
        """Index into the 2d-entry direction table given its cumulative law."""
        u = self.u01()
        j = 0
        # cdf[-1] is forced to 1.0 > u, so this terminates.
        while u >= cdf[j]:
            j += 1
        return j
