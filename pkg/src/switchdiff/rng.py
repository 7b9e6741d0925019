"""Counter-based random streams.

Every draw is a pure function of ``(seed, stream, k)``: word ``k`` of stream
``s`` under seed ``seed`` is word ``k % 4`` of the Philox4x64-10 block with
key ``(seed, s)`` and counter ``(k // 4, 0, 0, 0)``.  The block function is
bit-compatible with :class:`numpy.random.Philox` (checked in the tests); it is
re-expressed here only so that the simulation kernels can call it from numba
without creating one ``Generator`` object per trajectory.

Kernel-side state is a ``uint64[8]`` array ``[key0, key1, block, pos, w0..w3]``
plus a ``float64[2]`` Box-Muller cache ``[has_spare, spare]``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

_MASK32 = np.uint64(0xFFFFFFFF)
_S32 = np.uint64(32)
_S11 = np.uint64(11)
_M0 = np.uint64(0xD2E7470EE14C6C93)
_M1 = np.uint64(0xCA5A826395121157)
_W0 = np.uint64(0x9E3779B97F4A7C15)
_W1 = np.uint64(0xBB67AE8584CAA73B)
_ONE = np.uint64(1)
_ZERO = np.uint64(0)
_FOUR = np.uint64(4)
_TWO53_INV = 1.0 / 9007199254740992.0
_TWO_PI = 2.0 * np.pi


@njit(cache=True, nogil=True)
def _mulhilo(a, b):
    a_lo = a & _MASK32
    a_hi = a >> _S32
    b_lo = b & _MASK32
    b_hi = b >> _S32
    lo = a * b
    t = a_hi * b_lo + ((a_lo * b_lo) >> _S32)
    w1 = (t & _MASK32) + a_lo * b_hi
    hi = a_hi * b_hi + (t >> _S32) + (w1 >> _S32)
    return hi, lo


@njit(cache=True, nogil=True)
def philox_block(c0, c1, c2, c3, k0, k1):
    """Philox4x64-10 of counter ``(c0..c3)`` under key ``(k0, k1)``."""
    for rnd in range(10):
        if rnd > 0:
            k0 = k0 + _W0
            k1 = k1 + _W1
        hi0, lo0 = _mulhilo(_M0, c0)
        hi1, lo1 = _mulhilo(_M1, c2)
        c0, c1, c2, c3 = hi1 ^ c1 ^ k0, lo1, hi0 ^ c3 ^ k1, lo0
    return c0, c1, c2, c3


@njit(cache=True, nogil=True)
def stream_init(state, fstate, seed, stream):
    state[0] = np.uint64(seed)
    state[1] = np.uint64(stream)
    state[2] = _ZERO
    state[3] = _FOUR
    fstate[0] = 0.0
    fstate[1] = 0.0


@njit(cache=True, nogil=True)
def next_u64(state):
    if state[3] >= _FOUR:
        w0, w1, w2, w3 = philox_block(state[2], _ZERO, _ZERO, _ZERO, state[0], state[1])
        state[4] = w0
        state[5] = w1
        state[6] = w2
        state[7] = w3
        state[2] = state[2] + _ONE
        state[3] = _ZERO
    pos = state[3]
    state[3] = pos + _ONE
    return state[4 + np.int64(pos)]


@njit(cache=True, nogil=True)
def next_uniform(state):
    """Uniform on the open interval (0, 1)."""
    return ((next_u64(state) >> _S11) + 0.5) * _TWO53_INV


@njit(cache=True, nogil=True)
def next_exponential(state):
    return -np.log(next_uniform(state))


@njit(cache=True, nogil=True)
def next_normal(state, fstate):
    if fstate[0] != 0.0:
        fstate[0] = 0.0
        return fstate[1]
    u1 = next_uniform(state)
    u2 = next_uniform(state)
    rad = np.sqrt(-2.0 * np.log(u1))
    fstate[0] = 1.0
    fstate[1] = rad * np.sin(_TWO_PI * u2)
    return rad * np.cos(_TWO_PI * u2)


@njit(cache=True, nogil=True)
def draw_u64(seed, stream, k):
    """Word ``k`` of stream ``(seed, stream)`` without walking the stream."""
    block = np.uint64(k // 4)
    w = philox_block(block, _ZERO, _ZERO, _ZERO, np.uint64(seed), np.uint64(stream))
    return w[k % 4]


@dataclass(frozen=True)
class StreamDescriptor:
    seed: int
    stream: int

    def words(self, n: int) -> np.ndarray:
        """First ``n`` raw 64-bit words of this stream."""
        state = np.zeros(8, dtype=np.uint64)
        fstate = np.zeros(2)
        stream_init(state, fstate, self.seed, self.stream)
        return np.array([next_u64(state) for _ in range(n)], dtype=np.uint64)


def seed_streams(seed: int, n: int) -> list[StreamDescriptor]:
    """Descriptors for streams ``1..n`` under ``seed``."""
    if n < 1:
        raise ValueError("need at least one stream")
    # kernels take seeds as int64 arguments
    if not 0 <= seed < 2**63:
        raise ValueError("seed must lie in [0, 2**63)")
    return [StreamDescriptor(int(seed), s) for s in range(1, n + 1)]
