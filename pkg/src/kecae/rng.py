"""Seeded pseudo-random number generation.

The generator is xoshiro256++ whose 256-bit state is expanded from a single
64-bit seed with splitmix64. Both algorithms are integer-exact, so a given
seed produces the same stream on every platform and Python build. Gaussian
variates come from the Box-Muller transform applied to consecutive stream
outputs (the second variate of each pair is cached), which keeps the normal
stream a pure function of the uniform stream.

Derived streams for independent jobs (per-batch augmentation, per-cell grid
jobs, ...) are obtained by hashing the parent seed together with integer tags
through splitmix64; see :func:`derive_seed`.
"""

from __future__ import annotations

import math

_MASK64 = (1 << 64) - 1
_DOUBLE_UNIT = 2.0 ** -53


def _splitmix64(state: int) -> tuple[int, int]:
    """Advance a splitmix64 state, returning (new_state, output)."""
    state = (state + 0x9E3779B97F4A7C15) & _MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return state, z ^ (z >> 31)


def _mix64(z: int) -> int:
    """splitmix64 output finalizer; full avalanche on the 64-bit input."""
    z &= _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def derive_seed(seed: int, *tags: int) -> int:
    """Derive a child seed from ``seed`` and integer tags.

    Every tag is fully mixed before being folded in, so distinct tag tuples
    give statistically independent streams. Deterministic and order-sensitive.
    """
    h = _mix64((seed + 0x9E3779B97F4A7C15) & _MASK64)
    for tag in tags:
        h = _mix64((h + 0x9E3779B97F4A7C15) ^ _mix64((tag + 0x632BE59BD9B4E019) & _MASK64))
    return h


class Rng:
    """xoshiro256++ stream seeded via splitmix64 from a 64-bit seed."""

    def __init__(self, seed: int):
        self.seed = seed & _MASK64
        sm = self.seed
        state = []
        for _ in range(4):
            sm, out = _splitmix64(sm)
            state.append(out)
        self._s = state
        self._gauss_cache: float | None = None

    def next_uint64(self) -> int:
        """Return the next raw 64-bit output of the stream."""
        s0, s1, s2, s3 = self._s
        tmp = (s0 + s3) & _MASK64
        result = (((tmp << 23) | (tmp >> 41)) + s0) & _MASK64
        t = (s1 << 17) & _MASK64
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = ((s3 << 45) | (s3 >> 19)) & _MASK64
        self._s = [s0, s1, s2, s3]
        return result

    def uniform(self, lo: float = 0.0, hi: float = 1.0) -> float:
        """Uniform double in [lo, hi), using the top 53 bits of the stream."""
        u = (self.next_uint64() >> 11) * _DOUBLE_UNIT
        return lo + (hi - lo) * u

    def normal(self, mean: float = 0.0, std: float = 1.0) -> float:
        """Gaussian variate via Box-Muller; pairs are drawn lazily."""
        if self._gauss_cache is not None:
            z = self._gauss_cache
            self._gauss_cache = None
        else:
            # 1 - u keeps the argument of log strictly positive.
            u1 = 1.0 - (self.next_uint64() >> 11) * _DOUBLE_UNIT
            u2 = (self.next_uint64() >> 11) * _DOUBLE_UNIT
            r = math.sqrt(-2.0 * math.log(u1))
            theta = 2.0 * math.pi * u2
            z = r * math.cos(theta)
            self._gauss_cache = r * math.sin(theta)
        return mean + std * z

    def normals(self, n: int) -> list[float]:
        """Draw ``n`` standard Gaussian variates.

        Same stream as ``n`` calls of :meth:`normal`; the generator loop is
        inlined because parameter initialization draws millions of values.
        """
        out: list[float] = []
        if n <= 0:
            return out
        if self._gauss_cache is not None:
            out.append(self._gauss_cache)
            self._gauss_cache = None
        s0, s1, s2, s3 = self._s
        append = out.append
        sqrt, log, cos, sin = math.sqrt, math.log, math.cos, math.sin
        two_pi = 2.0 * math.pi
        mask = _MASK64
        unit = _DOUBLE_UNIT
        while len(out) < n:
            tmp = (s0 + s3) & mask
            r1 = (((tmp << 23) | (tmp >> 41)) + s0) & mask
            t = (s1 << 17) & mask
            s2 ^= s0
            s3 ^= s1
            s1 ^= s2
            s0 ^= s3
            s2 ^= t
            s3 = ((s3 << 45) | (s3 >> 19)) & mask
            tmp = (s0 + s3) & mask
            r2 = (((tmp << 23) | (tmp >> 41)) + s0) & mask
            t = (s1 << 17) & mask
            s2 ^= s0
            s3 ^= s1
            s1 ^= s2
            s0 ^= s3
            s2 ^= t
            s3 = ((s3 << 45) | (s3 >> 19)) & mask
            u1 = 1.0 - (r1 >> 11) * unit
            theta = two_pi * ((r2 >> 11) * unit)
            r = sqrt(-2.0 * log(u1))
            append(r * cos(theta))
            append(r * sin(theta))
        self._s = [s0, s1, s2, s3]
        if len(out) > n:
            self._gauss_cache = out.pop()
        return out

    def randbelow(self, n: int) -> int:
        """Unbiased integer in [0, n) by rejection on the 64-bit stream."""
        if n <= 0:
            raise ValueError("randbelow requires n >= 1")
        threshold = (-n) % n  # == (2**64 - n) % n without bigint overflow
        while True:
            x = self.next_uint64()
            if x >= threshold:
                return x % n

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates shuffle."""
        for i in range(len(items) - 1, 0, -1):
            j = self.randbelow(i + 1)
            items[i], items[j] = items[j], items[i]

    def sample_range(self, n: int, k: int) -> list[int]:
        """Sample ``k`` distinct integers from range(n) without replacement.

        Partial Fisher-Yates over a virtual array, so ``n`` may be huge as
        long as ``k`` is moderate.
        """
        if not 0 <= k <= n:
            raise ValueError(f"cannot sample {k} items from range({n})")
        swapped: dict[int, int] = {}
        out = []
        for i in range(k):
            j = i + self.randbelow(n - i)
            vi = swapped.get(i, i)
            vj = swapped.get(j, j)
            out.append(vj)
            swapped[j] = vi
        return out

    def getstate(self) -> tuple:
        return (tuple(self._s), self._gauss_cache)

    def setstate(self, state: tuple) -> None:
        s, cache = state
        self._s = list(s)
        self._gauss_cache = cache

    def spawn(self, *tags: int) -> "Rng":
        """Child stream keyed by integer tags; independent of this stream."""
        return Rng(derive_seed(self.seed, *tags))
