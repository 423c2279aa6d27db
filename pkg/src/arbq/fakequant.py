"""Differentiable (straight-through) twins of the numpy quantizers.

``round`` passes gradient 1; ``clamp`` passes gradient only inside its
bounds. A :class:`RoundingTape` can record every rounding offset and clamp
saturation pattern of one forward pass and replay them, which turns the
quantized forward into a smooth function of its parameters (all discrete
decisions held fixed).
"""

from __future__ import annotations

from typing import Optional

import torch

from arbq.quantizer import QuantSpec, Scheme


class RoundingTape:
    """Records rounding offsets and clamp masks in "record" mode, replays them in "replay" mode."""

    def __init__(self):
        self.entries: list[tuple] = []
        self.mode = "record"
        self._cursor = 0

    def replay(self) -> "RoundingTape":
        self.mode = "replay"
        self._cursor = 0
        return self

    def _next(self, kind: str, shape) -> tuple:
        entry = self.entries[self._cursor]
        self._cursor += 1
        if entry[0] != kind or entry[1].shape != shape:
            raise RuntimeError("rounding tape replayed against a different forward graph")
        return entry

    def __call__(self, x: torch.Tensor) -> torch.Tensor:
        if self.mode == "record":
            offset = (round_half_away(x) - x).detach()
            self.entries.append(("round", offset))
            return x + offset
        return x + self._next("round", x.shape)[1]

    def clamp(self, x: torch.Tensor, lo: float, hi: float) -> torch.Tensor:
        if self.mode == "record":
            low, high = (x < lo).detach(), (x > hi).detach()
            self.entries.append(("clamp", low, high))
            return torch.clamp(x, lo, hi)
        _, low, high = self._next("clamp", x.shape)
        return torch.where(low, torch.full_like(x, lo), torch.where(high, torch.full_like(x, hi), x))


def round_half_away(x: torch.Tensor) -> torch.Tensor:
    return torch.sign(x) * torch.floor(x.abs() + 0.5)


def round_ste(x: torch.Tensor, tape: Optional[RoundingTape] = None) -> torch.Tensor:
    if tape is not None:
        return tape(x)
    return x + (round_half_away(x) - x).detach()


def clamp_ste(x: torch.Tensor, lo: float, hi: float, tape: Optional[RoundingTape] = None) -> torch.Tensor:
    if tape is not None:
        return tape.clamp(x, lo, hi)
    return torch.clamp(x, lo, hi)


def fake_quantize(
    x: torch.Tensor,
    spec: QuantSpec,
    *,
    alpha: Optional[torch.Tensor] = None,
    beta: Optional[torch.Tensor] = None,
    per_row: bool = True,
    tape: Optional[RoundingTape] = None,
) -> torch.Tensor:
    """Quantize-dequantize ``x`` with statistics over the last axis (per row).

    ``alpha``/``beta`` are per-row clip factors shaped like ``x[..., :1]``.
    Matches :func:`arbq.quantizer.quantize` followed by ``dequantize``.
    """
    if spec.passthrough:
        return x
    if per_row:
        mx = x.amax(dim=-1, keepdim=True)
        mn = x.amin(dim=-1, keepdim=True)
    else:
        mx = x.amax().reshape([1] * x.dim())
        mn = x.amin().reshape([1] * x.dim())
    if alpha is not None:
        mx = mx * alpha
    if beta is not None:
        mn = mn * beta
    if spec.scheme is Scheme.ASYMMETRIC:
        degenerate = (mx == mn).detach()
        scale = torch.where(degenerate, torch.ones_like(mx), (mx - mn) / spec.max_code)
        zero = torch.where(degenerate, torch.zeros_like(mn), round_ste(-mn / scale, tape))
    else:
        half = float(1 << (spec.bits - 1))
        absmax = torch.maximum(mx.abs(), mn.abs())
        degenerate = (absmax == 0).detach()
        scale = torch.where(degenerate, torch.ones_like(absmax), absmax / half)
        zero = torch.full_like(scale, half)
    codes = clamp_ste(round_ste(x / scale, tape) + zero, 0, spec.max_code, tape)
    return (codes - zero) * scale
