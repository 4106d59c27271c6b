"""Counter-based random streams (Philox4x32-10).

Every variate is addressed by ``(key, replicate, step, tag, index)`` rather than
drawn from a sequential state, so a replicate's randomness does not depend on
how replicates are scheduled across workers, and the pure-Python and compiled
engines can consume exactly the same numbers.

Counter layout: ``(index, step, replicate, tag | event << 8)``; the 64-bit key is
derived from the user seed with :class:`numpy.random.SeedSequence`.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numba as nb
import numpy as np

# tags: one per purpose so draws never collide
TAG_INDIVIDUAL = 1
TAG_COMMON = 2
TAG_EIGEN = 3
TAG_BRANCH = 4
TAG_EVENT = 5
TAG_INIT = 6
TAG_DUAL = 7
TAG_MISC = 8

_M0 = np.uint64(0xD2511F53)
_M1 = np.uint64(0xCD9E8D57)
_W0 = np.uint64(0x9E3779B9)
_W1 = np.uint64(0xBB67AE85)
_MASK = np.uint64(0xFFFFFFFF)
_TWO53 = 9007199254740992.0


@nb.njit(cache=True, inline="always")
def philox4x32(c0, c1, c2, c3, k0, k1):
    """Ten Philox rounds; all arguments are uint64 holding 32-bit values."""
    for _ in range(10):
        p0 = _M0 * c0
        p1 = _M1 * c2
        n0 = ((p1 >> np.uint64(32)) ^ c1 ^ k0) & _MASK
        n1 = p1 & _MASK
        n2 = ((p0 >> np.uint64(32)) ^ c3 ^ k1) & _MASK
        n3 = p0 & _MASK
        c0, c1, c2, c3 = n0, n1, n2, n3
        k0 = (k0 + _W0) & _MASK
        k1 = (k1 + _W1) & _MASK
    return c0, c1, c2, c3


@nb.njit(cache=True, inline="always")
def uniform_pair(k0, k1, rep, step, tag, index):
    """Two doubles in (0, 1) with 53-bit resolution."""
    a, b, c, d = philox4x32(np.uint64(index) & _MASK, np.uint64(step) & _MASK,
                            np.uint64(rep) & _MASK, np.uint64(tag) & _MASK, k0, k1)
    u1 = ((a >> np.uint64(5)) * np.uint64(67108864) + (b >> np.uint64(6)))
    u2 = ((c >> np.uint64(5)) * np.uint64(67108864) + (d >> np.uint64(6)))
    return (float(u1) + 0.5) / _TWO53, (float(u2) + 0.5) / _TWO53


@nb.njit(cache=True, inline="always")
def normal_pair(k0, k1, rep, step, tag, index):
    u1, u2 = uniform_pair(k0, k1, rep, step, tag, index)
    r = math.sqrt(-2.0 * math.log(u1))
    return r * math.cos(2.0 * math.pi * u2), r * math.sin(2.0 * math.pi * u2)


@nb.njit(cache=True, inline="always")
def normal_at(k0, k1, rep, step, tag, j):
    z0, z1 = normal_pair(k0, k1, rep, step, tag, j >> 1)
    return z0 if (j & 1) == 0 else z1


@nb.njit(cache=True)
def _fill_normals(k0, k1, rep, step, tag, start, out):
    n = out.shape[0]
    for j in range(n):
        out[j] = normal_at(k0, k1, rep, step, tag, start + j)


@nb.njit(cache=True)
def _fill_uniforms(k0, k1, rep, step, tag, start, out):
    n = out.shape[0]
    for j in range(n):
        u0, u1 = uniform_pair(k0, k1, rep, step, tag, (start + j) >> 1)
        out[j] = u0 if ((start + j) & 1) == 0 else u1


@nb.njit(cache=True)
def _raw_block(c0, c1, c2, c3, k0, k1):
    out = np.empty(4, dtype=np.uint64)
    out[0], out[1], out[2], out[3] = philox4x32(c0, c1, c2, c3, k0, k1)
    return out


def philox_block(counter, key) -> np.ndarray:
    """Raw Philox4x32-10 output for one 128-bit counter (known-answer testing)."""
    c = [np.uint64(int(v) & 0xFFFFFFFF) for v in counter]
    k = [np.uint64(int(v) & 0xFFFFFFFF) for v in key]
    return _raw_block(c[0], c[1], c[2], c[3], k[0], k[1]).astype(np.uint32)


def derive_key(seed: int) -> tuple[int, int]:
    """Spread a user seed over the 64-bit Philox key."""
    words = np.random.SeedSequence(int(seed)).generate_state(2, dtype=np.uint32)
    return int(words[0]), int(words[1])


@dataclass(frozen=True)
class Stream:
    """One replicate's stream; ``substream(step)`` pins the step counter.

    A ``Stream`` is a cheap immutable address; nothing is consumed when drawing,
    so callers choose disjoint ``(tag, start)`` ranges themselves.
    """

    seed: int
    replicate: int = 0
    step: int = 0

    @property
    def key(self) -> tuple[np.uint64, np.uint64]:
        k0, k1 = derive_key(self.seed)
        return np.uint64(k0), np.uint64(k1)

    def substream(self, step: int) -> "Stream":
        return Stream(self.seed, self.replicate, int(step))

    def replicate_stream(self, replicate: int) -> "Stream":
        return Stream(self.seed, int(replicate), 0)

    def normal(self, size, tag: int = TAG_MISC, start: int = 0) -> np.ndarray:
        shape = (size,) if np.isscalar(size) else tuple(size)
        out = np.empty(int(np.prod(shape)), dtype=np.float64)
        k0, k1 = self.key
        _fill_normals(k0, k1, np.uint64(self.replicate), np.uint64(self.step),
                      np.uint64(tag), np.int64(start), out)
        return out.reshape(shape)

    def uniform(self, size, tag: int = TAG_MISC, start: int = 0) -> np.ndarray:
        shape = (size,) if np.isscalar(size) else tuple(size)
        out = np.empty(int(np.prod(shape)), dtype=np.float64)
        k0, k1 = self.key
        _fill_uniforms(k0, k1, np.uint64(self.replicate), np.uint64(self.step),
                       np.uint64(tag), np.int64(start), out)
        return out.reshape(shape)

    def manifest(self) -> dict:
        k0, k1 = derive_key(self.seed)
        return {"generator": "philox4x32-10", "seed": int(self.seed),
                "replicate": int(self.replicate), "key": [k0, k1]}
