"""Arbitrary-bit integer GEMM built from 1-bit AND-popcount products.

A p-bit code matrix is split into p bit planes (BitPacking). The product of a
p-bit activation matrix with a q-bit weight matrix is the sum of p*q binary
matrix products, each shifted by ``2**(s+t)`` (Bit Reduction). Zero points
are removed afterwards so the engine only ever sees unsigned codes.

Operand conventions:

* ``a`` packs the activation codes, M x K, row-major.
* ``b`` packs the weight codes in column-major form: a K x N operand whose N
  columns are stored as packed rows, i.e. ``bitpack(W_codes)`` for a weight
  matrix ``W`` of shape (N, K).
"""

from __future__ import annotations

import logging
import math
import os
import statistics
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from arbq import _kernels

log = logging.getLogger(__name__)

WORD_BITS = 64
MMA_M = 8
MMA_N = 8
MMA_K = 128
BK_CHOICES = (128, 256, 384, 512)
BM_CHOICES = (1, 2, 4, 8, 16, 32, 64, 128)
BN_CHOICES = (8, 16, 32, 64, 128, 256)
#: (activation warps, weight warps) layouts tried by the tile search.
WARP_LAYOUTS = ((1, 1), (1, 2), (1, 4), (2, 2), (2, 4), (4, 4))
MAX_WARPS = 32
ACC32_BITS = 31


class AccumulatorOverflowError(ValueError):
    pass


class TileMismatchError(RuntimeError):
    pass


@dataclass
class BitPlaneMatrix:
    """``planes`` bitsets of a ``rows x cols`` code matrix, shape (planes, rows, words)."""

    planes: int
    rows: int
    cols: int
    data: np.ndarray

    @property
    def words_per_row(self) -> int:
        return self.data.shape[2]

    def __post_init__(self):
        expected = (self.planes, self.rows, _words(self.cols))
        if self.data.shape != expected or self.data.dtype != np.uint64:
            raise ValueError(f"bit plane data must be uint64 of shape {expected}, got {self.data.dtype} {self.data.shape}")


def _words(cols: int) -> int:
    return max(1, -(-cols // WORD_BITS))


def bitpack(codes: np.ndarray, bits: int) -> BitPlaneMatrix:
    """Split unsigned codes into ``bits`` row-major bit planes.

    Bit ``k`` of word ``w`` in row ``i`` of plane ``s`` holds
    ``(codes[i, 64*w + k] >> s) & 1``; bits past ``cols`` are zero.
    """
    codes = np.asarray(codes)
    if codes.ndim != 2:
        raise ValueError(f"codes must be 2-D, got shape {codes.shape}")
    if not 1 <= bits <= 32:
        raise ValueError(f"bits must be in [1, 32], got {bits}")
    bad = (codes < 0) | (codes >= (1 << bits))
    if bad.any():
        i, k = (int(v) for v in np.argwhere(bad)[0])
        raise ValueError(f"code {int(codes[i, k])} at ({i}, {k}) does not fit in {bits} bits")
    rows, cols = codes.shape
    nw = _words(cols)
    codes = codes.astype(np.uint32, copy=False)
    planes = np.zeros((bits, rows, nw * WORD_BITS), dtype=np.uint8)
    for s in range(bits):
        planes[s, :, :cols] = (codes >> s) & 1
    packed = np.packbits(planes, axis=-1, bitorder="little")
    data = np.ascontiguousarray(packed).view("<u8").astype(np.uint64, copy=False)
    return BitPlaneMatrix(bits, rows, cols, data.reshape(bits, rows, nw))


def unpack(m: BitPlaneMatrix) -> np.ndarray:
    bits = np.unpackbits(m.data.astype("<u8").view(np.uint8), axis=-1, bitorder="little")
    bits = bits[:, :, : m.cols].astype(np.int64)
    weights = (np.int64(1) << np.arange(m.planes, dtype=np.int64)).reshape(-1, 1, 1)
    return (bits * weights).sum(axis=0)


def padding_is_clear(m: BitPlaneMatrix) -> bool:
    """True when every bit beyond ``cols`` in the last word is zero."""
    tail = m.cols % WORD_BITS
    if tail == 0 and m.cols > 0:
        return True
    mask = np.uint64(~((1 << tail) - 1) & 0xFFFFFFFFFFFFFFFF)
    return not np.any(m.data[:, :, -1] & mask)


def bmma(a_plane: np.ndarray, b_plane: np.ndarray) -> np.ndarray:
    """Binary matrix product ``out[i, j] = sum_k a[i, k] AND b[k, j]``.

    ``a_plane`` is (m, words) row-major, ``b_plane`` is (n, words) holding the
    columns of the K x n operand.
    """
    a_plane = np.ascontiguousarray(a_plane, dtype=np.uint64)
    b_plane = np.ascontiguousarray(b_plane, dtype=np.uint64)
    if a_plane.ndim != 2 or b_plane.ndim != 2 or a_plane.shape[1] != b_plane.shape[1]:
        raise ValueError(f"bmma operands disagree on K words: {a_plane.shape} vs {b_plane.shape}")
    out = np.zeros((a_plane.shape[0], b_plane.shape[0]), dtype=np.int32)
    _kernels.and_popcount(a_plane, b_plane, out)
    return out


@dataclass(frozen=True)
class TileConfig:
    BM: int
    BN: int
    BK: int
    WM: int
    WN: int
    WK: int = MMA_K

    @property
    def config_id(self) -> str:
        return f"BM{self.BM}-BN{self.BN}-BK{self.BK}-WM{self.WM}-WN{self.WN}"

    def warps(self, p: int, q: int) -> tuple[int, int]:
        return (self.BM * p) // self.WM, (self.BN * q) // self.WN

    def violations(self, p: int, q: int) -> list[str]:
        errs = []
        if self.WK != MMA_K:
            errs.append(f"WK={self.WK} must equal {MMA_K}")
        if self.BK not in BK_CHOICES or self.BK % self.WK:
            errs.append(f"BK={self.BK} must be one of {BK_CHOICES}")
        if min(self.BM, self.BN, self.WM, self.WN) < 1:
            errs.append("tile sizes must be positive")
            return errs
        if self.WM % MMA_M or self.WN % MMA_N:
            errs.append(f"warp tile {self.WM}x{self.WN} not a multiple of {MMA_M}x{MMA_N}")
        if (self.BM * p) % self.WM or (self.BN * q) % self.WN:
            errs.append(f"warp tile {self.WM}x{self.WN} does not divide stacked block {self.BM * p}x{self.BN * q}")
        else:
            xw, ww = self.warps(p, q)
            if not 1 <= xw * ww <= MAX_WARPS:
                errs.append(f"warp count {xw}x{ww} outside [1, {MAX_WARPS}]")
        return errs

    def validate(self, p: int, q: int) -> "TileConfig":
        errs = self.violations(p, q)
        if errs:
            raise ValueError(f"invalid tile {self.config_id} for p={p}, q={q}: " + "; ".join(errs))
        return self


@dataclass
class KernelStats:
    """Instrumentation counters for one or more GEMM calls."""

    block_tiles: int = 0
    plane_products: int = 0
    kernel_calls: int = 0


@dataclass
class GemmResult:
    acc: np.ndarray
    corrected: Optional[np.ndarray] = None
    dequant: Optional[np.ndarray] = None
    stats: KernelStats = field(default_factory=KernelStats)


def overflow_bits(p: int, q: int, K: int) -> int:
    return p + q + math.ceil(math.log2(K + 1))


def _check_operands(a: BitPlaneMatrix, b: BitPlaneMatrix) -> None:
    if a.cols != b.cols:
        raise ValueError(f"inner dimensions differ: a is {a.rows}x{a.cols}, b holds {b.rows} columns of length {b.cols}")


def _acc_dtype(p: int, q: int, K: int, accumulator: str):
    need = overflow_bits(p, q, K)
    if accumulator == "int64":
        return np.int64
    if need <= ACC32_BITS:
        return np.int32
    if accumulator == "auto":
        return np.int64
    raise AccumulatorOverflowError(
        f"p + q + ceil(log2(K+1)) = {p} + {q} + {need - p - q} = {need} exceeds {ACC32_BITS} accumulator bits"
    )


def gemm_arbitrary(
    a: BitPlaneMatrix,
    b: BitPlaneMatrix,
    tile: TileConfig,
    *,
    accumulator: str = "int32",
    threads: Optional[int] = None,
    stats: Optional[KernelStats] = None,
) -> GemmResult:
    """Unsigned code product ``A @ B`` from p*q bit-plane products.

    Per block tile: stage the p*BM and q*BN stacked plane rows, accumulate
    warp tiles over K, then bit-reduce the (p*BM, q*BN) tile down to
    (BM, BN) with weights ``2**(s+t)`` and write it back.

    Args:
        accumulator: ``"int32"`` rejects shapes that could overflow 31 bits,
            ``"int64"`` always widens, ``"auto"`` widens only when needed.
        threads: worker count over block-tile columns (default: all CPUs).
    """
    _check_operands(a, b)
    p, q = a.planes, b.planes
    tile.validate(p, q)
    dtype = _acc_dtype(p, q, a.cols, accumulator)
    M, N = a.rows, b.rows
    out = np.zeros((M, N), dtype=dtype)
    stats = stats if stats is not None else KernelStats()
    if M == 0 or N == 0:
        return GemmResult(out, stats=stats)

    bk_words = tile.BK // WORD_BITS
    shifts = [[np.int64(1) << (s + t) for t in range(q)] for s in range(p)]

    def run_column(j0: int) -> KernelStats:
        local = KernelStats()
        j1 = min(j0 + tile.BN, N)
        bn = j1 - j0
        b_tile = np.ascontiguousarray(b.data[:, j0:j1, :]).reshape(q * bn, -1)
        for i0 in range(0, M, tile.BM):
            i1 = min(i0 + tile.BM, M)
            bm = i1 - i0
            a_tile = np.ascontiguousarray(a.data[:, i0:i1, :]).reshape(p * bm, -1)
            stacked = np.zeros((p * bm, q * bn), dtype=dtype)
            _kernels.block_tile_product(a_tile, b_tile, stacked, bk_words, tile.WM, tile.WN)
            local.kernel_calls += 1
            planes = stacked.reshape(p, bm, q, bn)
            reduced = np.zeros((bm, bn), dtype=dtype)
            for s in range(p):
                for t in range(q):
                    reduced += planes[s, :, t, :] * dtype(shifts[s][t])
                    local.plane_products += 1
            out[i0:i1, j0:j1] = reduced
            local.block_tiles += 1
        return local

    columns = range(0, N, tile.BN)
    workers = min(threads or os.cpu_count() or 1, len(columns))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run_column, columns))
    else:
        parts = [run_column(j0) for j0 in columns]
    for part in parts:
        stats.block_tiles += part.block_tiles
        stats.plane_products += part.plane_products
        stats.kernel_calls += part.kernel_calls
    return GemmResult(out, stats=stats)


def gemm_naive(a: BitPlaneMatrix, b: BitPlaneMatrix) -> np.ndarray:
    """Untiled baseline: one row at a time, one plane pair at a time, pure numpy."""
    _check_operands(a, b)
    out = np.zeros((a.rows, b.rows), dtype=np.int64)
    for s in range(a.planes):
        for t in range(b.planes):
            w = np.int64(1) << (s + t)
            for i in range(a.rows):
                counts = np.bitwise_count(a.data[s, i][None, :] & b.data[t]).sum(axis=1, dtype=np.int64)
                out[i] += counts * w
    return out


def zero_point_correct(
    acc: np.ndarray,
    a_rowsums: np.ndarray,
    b_colsums: np.ndarray,
    z_a: np.ndarray,
    z_b: np.ndarray,
    K: int,
) -> np.ndarray:
    """``sum_k (a - z_a)(b - z_b)`` from the unsigned product ``sum_k a b``."""
    acc = np.asarray(acc, dtype=np.int64)
    M, N = acc.shape
    a_rowsums = np.asarray(a_rowsums, dtype=np.int64).reshape(-1)
    b_colsums = np.asarray(b_colsums, dtype=np.int64).reshape(-1)
    z_a = np.broadcast_to(np.asarray(z_a, dtype=np.int64).reshape(-1), (M,))
    z_b = np.broadcast_to(np.asarray(z_b, dtype=np.int64).reshape(-1), (N,))
    if a_rowsums.shape != (M,) or b_colsums.shape != (N,):
        raise ValueError(f"row/column sums {a_rowsums.shape}/{b_colsums.shape} do not match accumulator {acc.shape}")
    return (
        acc
        - z_a[:, None] * b_colsums[None, :]
        - z_b[None, :] * a_rowsums[:, None]
        + K * z_a[:, None] * z_b[None, :]
    )


def dequantize_product(corrected: np.ndarray, s_a: np.ndarray, s_b: np.ndarray) -> np.ndarray:
    M, N = corrected.shape
    s_a = np.broadcast_to(np.asarray(s_a, dtype=np.float64).reshape(-1), (M,))
    s_b = np.broadcast_to(np.asarray(s_b, dtype=np.float64).reshape(-1), (N,))
    return corrected * s_a[:, None] * s_b[None, :]


def padding_redundancy(M: int, p: int, mma_m: int = MMA_M) -> float:
    """Fraction of MMA rows wasted on padding when p planes of M rows are stacked."""
    if M <= 0 or p <= 0 or mma_m <= 0:
        raise ValueError("M, p and mma_m must be positive")
    rows = p * M
    padded = -(-rows // mma_m) * mma_m
    return (padded - rows) / padded


def _row_waste(M: int, BM: int) -> int:
    return -(-M // BM) * BM - M


def _next_pow2(n: int) -> int:
    return 1 << max(0, (int(n) - 1).bit_length())


def enumerate_tile_candidates(p: int, q: int, M: int, N: int, K: int) -> list[TileConfig]:
    """Tile configurations for one (p, q, M, N, K) problem.

    For every expert warp layout and BK, BN is any power of two up to the
    N extent whose warp tiles are MMA_N aligned; BM is restricted to the
    values with the least padding of M among those giving MMA_M aligned warp
    tiles.
    """
    if not (1 <= p <= 8 and 1 <= q <= 8):
        raise ValueError(f"p, q must be in [1, 8], got p={p}, q={q}")
    bn_cap = max(BN_CHOICES[0], _next_pow2(N))
    bk_cap = max(BK_CHOICES[0], -(-K // MMA_K) * MMA_K)
    out = []
    for xw, ww in WARP_LAYOUTS:
        bms = [bm for bm in BM_CHOICES if (bm * p) % (xw * MMA_M) == 0]
        if not bms:
            continue
        least = min(_row_waste(M, bm) for bm in bms)
        bms = [bm for bm in bms if _row_waste(M, bm) == least]
        for bk in BK_CHOICES:
            if bk > bk_cap:
                continue
            for bn in BN_CHOICES:
                if bn > bn_cap or (bn * q) % (ww * MMA_N):
                    continue
                for bm in bms:
                    out.append(TileConfig(bm, bn, bk, bm * p // xw, bn * q // ww).validate(p, q))
    return out


def default_tile(p: int, q: int, M: int, N: int, K: int) -> TileConfig:
    """A reasonable untuned choice: single warp, widest BN and BK available."""
    cands = [c for c in enumerate_tile_candidates(p, q, M, N, K) if c.warps(p, q) == (1, 1)]
    return max(cands, key=lambda c: (c.BK, c.BN, -c.BM))


def prune_candidates(candidates: Sequence[TileConfig], limit: int) -> list[TileConfig]:
    """Deterministic, evenly spread subset of at most ``limit`` candidates."""
    if limit <= 0 or len(candidates) <= limit:
        return list(candidates)
    idx = np.linspace(0, len(candidates) - 1, limit).round().astype(int)
    return [candidates[i] for i in sorted(set(idx.tolist()))]


@dataclass
class BenchRecord:
    config_id: str
    BM: int
    BN: int
    BK: int
    WM: int
    WN: int
    p: int
    q: int
    M: int
    N: int
    K: int
    median_us: float
    tops: float

    FIELDS = ("config_id", "BM", "BN", "BK", "WM", "WN", "p", "q", "M", "N", "K", "median_us", "tops")

    @classmethod
    def make(cls, config_id, tile: Optional[TileConfig], p, q, M, N, K, median_us) -> "BenchRecord":
        dims = (tile.BM, tile.BN, tile.BK, tile.WM, tile.WN) if tile else (0, 0, 0, 0, 0)
        return cls(config_id, *dims, p, q, M, N, K, median_us, throughput_tops(M, N, K, median_us))


def throughput_tops(M: int, N: int, K: int, latency_us: float) -> float:
    if latency_us <= 0:
        raise ValueError("latency must be positive")
    return 2.0 * M * N * K / (latency_us * 1e-6) / 1e12


def time_median_us(fn, trials: int) -> tuple[float, object]:
    """Median wall time of ``fn`` over ``trials`` runs after one discarded warm-up."""
    result = fn()
    samples = []
    for _ in range(trials):
        t0 = time.perf_counter_ns()
        result = fn()
        samples.append((time.perf_counter_ns() - t0) / 1e3)
    return max(statistics.median(samples), 1e-3), result


def autotune(
    candidates: Sequence[TileConfig],
    a: BitPlaneMatrix,
    b: BitPlaneMatrix,
    trials: int = 3,
    *,
    reference: Optional[np.ndarray] = None,
    accumulator: str = "auto",
    threads: Optional[int] = None,
) -> tuple[TileConfig, list[BenchRecord]]:
    """Time every candidate and return the fastest with all measurements.

    Every candidate's output must equal ``reference`` exactly (computed with
    the naive baseline when not supplied).
    """
    if not candidates:
        raise ValueError("no tile candidates to tune")
    if trials < 3:
        raise ValueError("autotune needs at least 3 trials")
    if reference is None:
        reference = gemm_naive(a, b)
    M, N, K = a.rows, b.rows, a.cols
    records = []
    best, best_us = None, math.inf
    for tile in candidates:
        median_us, res = time_median_us(
            lambda: gemm_arbitrary(a, b, tile, accumulator=accumulator, threads=threads), trials
        )
        if not np.array_equal(res.acc, reference):
            raise TileMismatchError(f"tile {tile.config_id} produced a result differing from the reference")
        records.append(BenchRecord.make(tile.config_id, tile, a.planes, b.planes, M, N, K, median_us))
        log.debug("tile %s: %.1f us", tile.config_id, median_us)
        if median_us < best_us:
            best, best_us = tile, median_us
    return best, records
