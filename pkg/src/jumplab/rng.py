"""Counter-based random streams (Philox4x64-10) usable inside numba kernels.

Every path owns a stream addressed by (key, path index, stream id); block j of
that stream is Philox(counter = (j + 1, path, stream, 0), key).  The block layout
matches ``numpy.random.Philox(key=key, counter=[0, path, stream, 0])`` so the
raw words can be checked against numpy directly.

State of one stream is a uint64 array ``[k0, k1, path, stream, block, pos, w0..w3]``
plus a float64 array ``[has_spare, spare]`` for the polar normal method.
"""

from __future__ import annotations

import math

import numba as nb
import numpy as np

_M0 = np.uint64(0xD2E7470EE14C6C93)
_M1 = np.uint64(0xCA5A826395121157)
_W0 = np.uint64(0x9E3779B97F4A7C15)
_W1 = np.uint64(0xBB67AE8584CAA73B)
_MASK32 = np.uint64(0xFFFFFFFF)
_S32 = np.uint64(32)
_S11 = np.uint64(11)

STATE_WORDS = 10


@nb.njit(inline="always")
def _mulhilo(a, b):
    a_lo = a & _MASK32
    a_hi = a >> _S32
    b_lo = b & _MASK32
    b_hi = b >> _S32
    p0 = a_lo * b_lo
    p1 = a_lo * b_hi
    p2 = a_hi * b_lo
    p3 = a_hi * b_hi
    mid = (p0 >> _S32) + (p1 & _MASK32) + (p2 & _MASK32)
    hi = p3 + (p1 >> _S32) + (p2 >> _S32) + (mid >> _S32)
    return hi, a * b


@nb.njit(cache=True, inline="always")
def philox4x64(c0, c1, c2, c3, k0, k1):
    for _ in range(10):
        hi0, lo0 = _mulhilo(_M0, c0)
        hi1, lo1 = _mulhilo(_M1, c2)
        c0, c1, c2, c3 = hi1 ^ c1 ^ k0, lo1, hi0 ^ c3 ^ k1, lo0
        k0 = k0 + _W0
        k1 = k1 + _W1
    return c0, c1, c2, c3


@nb.njit(cache=True, inline="always")
def stream_init(st, fs, k0, k1, path, stream):
    st[0] = k0
    st[1] = k1
    st[2] = path
    st[3] = stream
    st[4] = np.uint64(0)
    st[5] = np.uint64(4)
    fs[0] = 0.0
    fs[1] = 0.0


@nb.njit(cache=True, inline="always")
def next_u64(st):
    if st[5] >= np.uint64(4):
        st[4] += np.uint64(1)
        w0, w1, w2, w3 = philox4x64(st[4], st[2], st[3], np.uint64(0), st[0], st[1])
        st[6] = w0
        st[7] = w1
        st[8] = w2
        st[9] = w3
        st[5] = np.uint64(0)
    v = st[6 + st[5]]
    st[5] += np.uint64(1)
    return v


@nb.njit(cache=True, inline="always")
def next_uniform(st):
    """Uniform on the open interval (0, 1)."""
    return (float(np.int64(next_u64(st) >> _S11)) + 0.5) * (1.0 / 9007199254740992.0)


@nb.njit(cache=True, inline="always")
def next_normal(st, fs):
    if fs[0] != 0.0:
        fs[0] = 0.0
        return fs[1]
    # Marsaglia polar method: no trigonometric calls
    while True:
        v1 = 2.0 * next_uniform(st) - 1.0
        v2 = 2.0 * next_uniform(st) - 1.0
        s = v1 * v1 + v2 * v2
        if s < 1.0 and s > 0.0:
            break
    f = math.sqrt(-2.0 * math.log(s) / s)
    fs[0] = 1.0
    fs[1] = v2 * f
    return v1 * f


@nb.njit(cache=True, inline="always")
def next_exponential(st):
    return -math.log(next_uniform(st))


@nb.njit(cache=True)
def _fill_raw(k0, k1, path, stream, out):
    st = np.empty(STATE_WORDS, dtype=np.uint64)
    fs = np.empty(2)
    stream_init(st, fs, k0, k1, path, stream)
    for i in range(out.shape[0]):
        out[i] = next_u64(st)


@nb.njit(cache=True)
def _fill_uniform(k0, k1, path, stream, out):
    st = np.empty(STATE_WORDS, dtype=np.uint64)
    fs = np.empty(2)
    stream_init(st, fs, k0, k1, path, stream)
    for i in range(out.shape[0]):
        out[i] = next_uniform(st)


@nb.njit(cache=True)
def _fill_normal(k0, k1, path, stream, out):
    st = np.empty(STATE_WORDS, dtype=np.uint64)
    fs = np.empty(2)
    stream_init(st, fs, k0, k1, path, stream)
    for i in range(out.shape[0]):
        out[i] = next_normal(st, fs)


def master_key(seed: int) -> tuple[np.uint64, np.uint64]:
    """Philox key derived from a master seed through numpy's SeedSequence."""
    k = np.random.SeedSequence(int(seed)).generate_state(2, dtype=np.uint64)
    return np.uint64(k[0]), np.uint64(k[1])


class StreamFactory:
    """Addresses independent streams by (path, stream id) under one master seed."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self.k0, self.k1 = master_key(self.seed)

    def raw(self, path: int, stream: int, n: int) -> np.ndarray:
        out = np.empty(n, dtype=np.uint64)
        _fill_raw(self.k0, self.k1, np.uint64(path), np.uint64(stream), out)
        return out

    def uniform(self, path: int, stream: int, n: int) -> np.ndarray:
        out = np.empty(n)
        _fill_uniform(self.k0, self.k1, np.uint64(path), np.uint64(stream), out)
        return out

    def normal(self, path: int, stream: int, n: int) -> np.ndarray:
        out = np.empty(n)
        _fill_normal(self.k0, self.k1, np.uint64(path), np.uint64(stream), out)
        return out
