"""Uniform quantizers: asymmetric, symmetric and balanced level sets.

Codes are always stored unsigned (``level + zero_point``) so they can be fed
straight into the bit-plane GEMM engine. Signedness is recovered afterwards
through zero-point correction.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

ArrayOrScalar = Union[float, np.ndarray]

#: Bit widths at or above this value disable quantization entirely.
PASSTHROUGH_BITS = 16
MAX_ENGINE_BITS = 8


class Scheme(enum.IntEnum):
    ASYMMETRIC = 0
    SYMMETRIC = 1
    BALANCED = 2

    @classmethod
    def parse(cls, name: Union[str, "Scheme"]) -> "Scheme":
        if isinstance(name, Scheme):
            return name
        try:
            return cls[name.strip().upper()]
        except KeyError:
            raise ValueError(f"unknown quantization scheme {name!r}") from None


class Granularity(enum.IntEnum):
    PER_TENSOR = 0
    PER_CHANNEL = 1
    PER_TOKEN = 2

    @classmethod
    def parse(cls, name: Union[str, "Granularity"]) -> "Granularity":
        if isinstance(name, Granularity):
            return name
        key = name.strip().upper().replace("-", "_")
        try:
            return cls[key]
        except KeyError:
            raise ValueError(f"unknown granularity {name!r}") from None


@dataclass(frozen=True)
class QuantSpec:
    """How a tensor is quantized.

    ``alpha``/``beta`` scale the max/min of each reduction axis before the
    step size is derived; they may be scalars or per-row vectors.
    ``balance_scale`` multiplies weight columns (per-channel / per-tensor
    granularity) or divides activation columns (per-token granularity).
    """

    bits: int
    scheme: Scheme = Scheme.ASYMMETRIC
    granularity: Granularity = Granularity.PER_TENSOR
    alpha: ArrayOrScalar = 1.0
    beta: ArrayOrScalar = 1.0
    balance_scale: Optional[np.ndarray] = None

    def __post_init__(self):
        object.__setattr__(self, "scheme", Scheme.parse(self.scheme))
        object.__setattr__(self, "granularity", Granularity.parse(self.granularity))
        if not (1 <= self.bits <= MAX_ENGINE_BITS or self.bits == PASSTHROUGH_BITS):
            raise ValueError(
                f"bits must be in [1, {MAX_ENGINE_BITS}] or {PASSTHROUGH_BITS} (passthrough), got {self.bits}"
            )
        for name in ("alpha", "beta"):
            v = np.asarray(getattr(self, name), dtype=np.float64)
            if not np.all((v > 0) & (v <= 1)):
                raise ValueError(f"{name} must lie in (0, 1], got {v}")
        if self.balance_scale is not None:
            s = np.asarray(self.balance_scale, dtype=np.float64)
            if s.ndim != 1 or not np.all(s > 0) or not np.all(np.isfinite(s)):
                raise ValueError("balance_scale must be a vector of finite positive reals")
            object.__setattr__(self, "balance_scale", s)

    @property
    def passthrough(self) -> bool:
        return self.bits >= PASSTHROUGH_BITS

    @property
    def levels(self) -> int:
        n = 1 << self.bits
        return n + 1 if self.scheme is Scheme.BALANCED else n

    @property
    def max_code(self) -> int:
        return self.levels - 1

    @property
    def planes(self) -> int:
        """Bit planes needed to hold one unsigned code."""
        return math.ceil(math.log2(self.levels))


@dataclass(frozen=True)
class CompensationPair:
    """Low-rank additive correction ``gamma * a b^T`` applied before rounding."""

    a: np.ndarray
    b: np.ndarray
    gamma: int = 1

    def delta(self) -> np.ndarray:
        return self.gamma * np.outer(np.asarray(self.a, np.float64), np.asarray(self.b, np.float64))


@dataclass
class QuantizedTensor:
    codes: np.ndarray
    scales: np.ndarray
    zero_points: np.ndarray
    spec: QuantSpec

    @property
    def shape(self) -> tuple[int, int]:
        return self.codes.shape

    def __post_init__(self):
        self.codes = np.asarray(self.codes, dtype=np.int32)
        self.scales = np.asarray(self.scales, dtype=np.float64).reshape(-1)
        self.zero_points = np.asarray(self.zero_points, dtype=np.int32).reshape(-1)
        if self.codes.ndim != 2:
            raise ValueError("codes must be a 2-D matrix")
        if len(self.scales) != len(self.zero_points):
            raise ValueError("scales and zero_points must align")
        expected = 1 if self.spec.granularity is Granularity.PER_TENSOR else self.codes.shape[0]
        if len(self.scales) != expected:
            raise ValueError(f"{self.spec.granularity.name} expects {expected} scales, got {len(self.scales)}")

    def row_scales(self) -> np.ndarray:
        return np.broadcast_to(self.scales, (self.codes.shape[0],)).copy()

    def row_zero_points(self) -> np.ndarray:
        return np.broadcast_to(self.zero_points, (self.codes.shape[0],)).copy()


def round_half_away(x):
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def _check_finite(x: np.ndarray) -> None:
    bad = ~np.isfinite(x)
    if bad.any():
        idx = tuple(int(i) for i in np.argwhere(bad)[0])
        raise ValueError(f"non-finite input at index {idx}: {x[idx]}")


def _axis_stats(x: np.ndarray, granularity: Granularity) -> tuple[np.ndarray, np.ndarray]:
    if granularity is Granularity.PER_TENSOR:
        return np.array([[x.max()]]), np.array([[x.min()]])
    return x.max(axis=1, keepdims=True), x.min(axis=1, keepdims=True)


def _as_column(v: ArrayOrScalar) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    return v.reshape(-1, 1) if v.ndim else v.reshape(1, 1)


def quant_params(x: np.ndarray, spec: QuantSpec) -> tuple[np.ndarray, np.ndarray]:
    """Step sizes and zero points as ``(n, 1)`` columns (``n`` = 1 or rows)."""
    mx, mn = _axis_stats(x, spec.granularity)
    mx = mx * _as_column(spec.alpha)
    mn = mn * _as_column(spec.beta)
    if spec.scheme is Scheme.ASYMMETRIC:
        degenerate = mx == mn
        scale = np.where(degenerate, 1.0, (mx - mn) / np.where(degenerate, 1.0, spec.max_code))
        zero = np.where(degenerate, 0.0, round_half_away(-mn / scale))
    else:
        half = 1 << (spec.bits - 1)
        absmax = np.maximum(np.abs(mx), np.abs(mn))
        scale = np.where(absmax == 0, 1.0, absmax / half)
        zero = np.full_like(scale, half)
    return scale, zero.astype(np.int64)


def quantize(
    x: np.ndarray,
    spec: QuantSpec,
    comp: Optional[CompensationPair] = None,
    *,
    scale: Optional[ArrayOrScalar] = None,
    zero_point: Optional[ArrayOrScalar] = None,
) -> QuantizedTensor:
    """Round-to-nearest uniform quantization with optional explicit Δ / z.

    Args:
        x: 2-D real matrix.
        spec: quantization settings. Passthrough specs are rejected here.
        comp: compensation pair, added to ``x`` before statistics and rounding.
        scale, zero_point: override the derived step size / zero point
            (scalars or per-row vectors).

    Raises:
        ValueError: on non-finite input, passthrough spec, or shape errors.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {x.shape}")
    if spec.passthrough:
        raise ValueError("passthrough spec has no quantized representation")
    _check_finite(x)
    if spec.balance_scale is not None:
        s = spec.balance_scale
        if len(s) != x.shape[1]:
            raise ValueError(f"balance_scale length {len(s)} != columns {x.shape[1]}")
        x = x / s if spec.granularity is Granularity.PER_TOKEN else x * s
    if comp is not None and comp.gamma:
        x = x + comp.delta()
    if (scale is None) != (zero_point is None):
        raise ValueError("scale and zero_point must be given together")
    if scale is None:
        scale, zero = quant_params(x, spec)
    else:
        scale = _as_column(scale)
        zero = np.asarray(zero_point, dtype=np.int64).reshape(-1, 1)
        if np.any(scale <= 0):
            raise ValueError("explicit scale must be positive")
    codes = np.clip(round_half_away(x / scale) + zero, 0, spec.max_code)
    return QuantizedTensor(codes.astype(np.int32), scale.reshape(-1), zero.reshape(-1), spec)


def quantize_balanced(x: np.ndarray, bits: int, granularity=Granularity.PER_TENSOR) -> QuantizedTensor:
    """Quantize onto the symmetric level set ``{-2^(bits-1), ..., 2^(bits-1)}``."""
    return quantize(x, QuantSpec(bits, Scheme.BALANCED, granularity))


def signed_levels(spec: QuantSpec) -> np.ndarray:
    """All representable signed levels (code minus zero point) of a scheme."""
    if spec.scheme is Scheme.ASYMMETRIC:
        raise ValueError("asymmetric level sets depend on the data-derived zero point")
    half = 1 << (spec.bits - 1)
    return np.arange(spec.levels) - half


def dequantize(q: QuantizedTensor) -> np.ndarray:
    scale = q.scales.reshape(-1, 1)
    zero = q.zero_points.reshape(-1, 1).astype(np.int64)
    return (q.codes.astype(np.int64) - zero) * scale


def apply_balance(w: np.ndarray, x: np.ndarray, s: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(W diag(s), diag(s)^-1 X)`` for ``W`` (M x K) and ``X`` (K x N)."""
    w = np.asarray(w, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64).reshape(-1)
    if w.shape[1] != len(s) or x.shape[0] != len(s):
        raise ValueError(f"balance vector length {len(s)} does not match inner dimension")
    if np.any(s <= 0):
        k = int(np.argmax(s <= 0))
        raise ValueError(f"balance scale must be positive, s[{k}] = {s[k]}")
    return w * s, x / s[:, None]
