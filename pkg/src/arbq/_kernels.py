"""JIT-compiled AND-popcount inner loops.

LLVM lowers the SWAR sequence in ``_popcount64`` to a native ``popcnt``.
"""

import numpy as np
from numba import njit

_M1 = np.uint64(0x5555555555555555)
_M2 = np.uint64(0x3333333333333333)
_M4 = np.uint64(0x0F0F0F0F0F0F0F0F)
_H01 = np.uint64(0x0101010101010101)
_ONE = np.uint64(1)
_TWO = np.uint64(2)
_FOUR = np.uint64(4)
_SHIFT = np.uint64(56)


@njit(cache=True, nogil=True, inline="always")
def _popcount64(x):
    x = x - ((x >> _ONE) & _M1)
    x = (x & _M2) + ((x >> _TWO) & _M2)
    x = (x + (x >> _FOUR)) & _M4
    return (x * _H01) >> _SHIFT


@njit(cache=True, nogil=True)
def and_popcount(a, b, out):
    """out[i, j] += sum_w popcount(a[i, w] & b[j, w])."""
    m, nw = a.shape
    n = b.shape[0]
    for i in range(m):
        for j in range(n):
            acc = 0
            for w in range(nw):
                acc += _popcount64(a[i, w] & b[j, w])
            out[i, j] += acc


@njit(cache=True, nogil=True)
def block_tile_product(a, b, out, bk_words, wm, wn):
    """Accumulate one stacked block tile.

    ``a`` is (p*BM, words) and ``b`` is (q*BN, words). K is walked in BK
    chunks; each chunk is split into WM x WN warp tiles, computed four
    ``a`` rows at a time so every ``b`` word is loaded once per row group.
    """
    m, nw = a.shape
    n = b.shape[0]
    for k0 in range(0, nw, bk_words):
        k1 = min(k0 + bk_words, nw)
        for i0 in range(0, m, wm):
            i1 = min(i0 + wm, m)
            for j0 in range(0, n, wn):
                j1 = min(j0 + wn, n)
                i = i0
                while i + 3 < i1:
                    for j in range(j0, j1):
                        c0 = 0
                        c1 = 0
                        c2 = 0
                        c3 = 0
                        for w in range(k0, k1):
                            y = b[j, w]
                            c0 += _popcount64(a[i, w] & y)
                            c1 += _popcount64(a[i + 1, w] & y)
                            c2 += _popcount64(a[i + 2, w] & y)
                            c3 += _popcount64(a[i + 3, w] & y)
                        out[i, j] += c0
                        out[i + 1, j] += c1
                        out[i + 2, j] += c2
                        out[i + 3, j] += c3
                    i += 4
                while i < i1:
                    for j in range(j0, j1):
                        c = 0
                        for w in range(k0, k1):
                            c += _popcount64(a[i, w] & b[j, w])
                        out[i, j] += c
                    i += 1
