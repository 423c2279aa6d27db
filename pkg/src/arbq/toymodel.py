"""A minimal LLaMA-style decoder block and its quantized data flow.

The block is RMSNorm -> q/k/v -> causal softmax attention -> o_proj with a
residual, then RMSNorm -> SiLU(gate) * up -> down_proj with a residual. All
arithmetic is float64.

Three interchangeable linear backends drive the same block:

* full precision (``forward_fp``),
* simulated quantization with straight-through rounding, differentiable in
  the calibration parameters (``forward_simulated``),
* the integer engine: per-token ReQuant, online activation BitPacking,
  bit-plane GEMM, zero-point correction and DeQuant (``forward_quant``).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Callable, Mapping, Optional

import numpy as np
import torch

from arbq import bitkernel as bk
from arbq.fakequant import RoundingTape, fake_quantize
from arbq.quantizer import (
    CompensationPair,
    Granularity,
    QuantizedTensor,
    QuantSpec,
    Scheme,
    dequantize,
    quantize,
)

if TYPE_CHECKING:
    from arbq.calibration import CalibState

LINEAR_NAMES = ("q_proj", "k_proj", "v_proj", "o_proj", "gate_proj", "up_proj", "down_proj")
COMPENSATED_LAYER = "down_proj"
KV_NAMES = ("k_cache", "v_cache")


def _weight_shapes(d: int, h: int) -> dict[str, tuple[int, int]]:
    return {
        "q_proj": (d, d), "k_proj": (d, d), "v_proj": (d, d), "o_proj": (d, d),
        "gate_proj": (h, d), "up_proj": (h, d), "down_proj": (d, h),
    }


@dataclass
class ToyBlock:
    dim: int
    heads: int
    hidden: int
    weights: dict[str, np.ndarray]
    attn_norm: np.ndarray
    mlp_norm: np.ndarray
    eps: float = 1e-6

    def __post_init__(self):
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")
        for name, shape in _weight_shapes(self.dim, self.hidden).items():
            w = self.weights.get(name)
            if w is None or w.shape != shape:
                raise ValueError(f"{name} must have shape {shape}")
        self._torch: Optional[dict[str, torch.Tensor]] = None

    @classmethod
    def random(cls, dim: int = 32, heads: int = 4, hidden: int = 86, seed: int = 42) -> "ToyBlock":
        """Seeded Gaussian weights scaled by ``1/sqrt(fan_in)``."""
        rng = np.random.default_rng(seed)
        shapes = _weight_shapes(dim, hidden)
        weights = {n: rng.standard_normal(s) / math.sqrt(s[1]) for n, s in shapes.items()}
        return cls(dim, heads, hidden, weights, np.ones(dim), np.ones(dim))

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    def tensors(self) -> dict[str, torch.Tensor]:
        if self._torch is None:
            t = {n: torch.as_tensor(w, dtype=torch.float64) for n, w in self.weights.items()}
            t["attn_norm"] = torch.as_tensor(self.attn_norm, dtype=torch.float64)
            t["mlp_norm"] = torch.as_tensor(self.mlp_norm, dtype=torch.float64)
            self._torch = t
        return self._torch

    def named_tensors(self) -> dict[str, np.ndarray]:
        out = dict(self.weights)
        out["attn_norm"] = self.attn_norm
        out["mlp_norm"] = self.mlp_norm
        return out


@dataclass
class BlockSpecs:
    """Per-layer weight and activation quantizers plus the KV-cache quantizer."""

    weight: dict[str, QuantSpec]
    act: dict[str, QuantSpec]
    kv: QuantSpec

    @classmethod
    def uniform(cls, bits_w: int, bits_a: int, w_scheme="asymmetric", a_scheme="asymmetric") -> "BlockSpecs":
        w = QuantSpec(bits_w, Scheme.parse(w_scheme), Granularity.PER_CHANNEL)
        a = QuantSpec(bits_a, Scheme.parse(a_scheme), Granularity.PER_TOKEN)
        return cls({n: w for n in LINEAR_NAMES}, {n: a for n in LINEAR_NAMES}, a)

    @property
    def passthrough(self) -> bool:
        return self.kv.passthrough and all(
            self.weight[n].passthrough and self.act[n].passthrough for n in LINEAR_NAMES
        )

    def quantized_layers(self) -> list[str]:
        return [n for n in LINEAR_NAMES if not (self.weight[n].passthrough and self.act[n].passthrough)]


@dataclass
class ForwardTrace:
    events: list[tuple[str, str]] = field(default_factory=list)
    inputs: dict[str, np.ndarray] = field(default_factory=dict)
    outputs: dict[str, np.ndarray] = field(default_factory=dict)
    attn: Optional[np.ndarray] = None
    act_scales: dict[str, int] = field(default_factory=dict)
    weight_scales: dict[str, int] = field(default_factory=dict)

    def record(self, layer: str, op: str) -> None:
        self.events.append((layer, op))

    def count(self, op: str, layer: Optional[str] = None) -> int:
        return sum(1 for l, o in self.events if o == op and (layer is None or l == layer))


LinearFn = Callable[[str, torch.Tensor], torch.Tensor]
KvFn = Callable[[str, torch.Tensor], torch.Tensor]


def _rmsnorm(x: torch.Tensor, w: torch.Tensor, eps: float) -> torch.Tensor:
    return x * torch.rsqrt(x.pow(2).mean(dim=-1, keepdim=True) + eps) * w


def _block_forward(
    block: ToyBlock,
    x: torch.Tensor,
    linear: LinearFn,
    kv: Optional[KvFn],
    trace: Optional[ForwardTrace],
) -> tuple[torch.Tensor, torch.Tensor]:
    t = block.tensors()
    T = x.shape[-2]
    lead = x.shape[:-2]
    h = _rmsnorm(x, t["attn_norm"], block.eps)
    q = linear("q_proj", h)
    k = linear("k_proj", h)
    v = linear("v_proj", h)
    if kv is not None:
        k = kv("k_cache", k)
        v = kv("v_cache", v)

    def heads(z):
        return z.reshape(*lead, T, block.heads, block.head_dim).transpose(-3, -2)

    scores = heads(q) @ heads(k).transpose(-1, -2) / math.sqrt(block.head_dim)
    causal = torch.ones(T, T, dtype=torch.bool).triu(1)
    scores = scores.masked_fill(causal, float("-inf"))
    attn = torch.softmax(scores, dim=-1)
    ctx = (attn @ heads(v)).transpose(-3, -2).reshape(*lead, T, block.dim)
    x1 = x + linear("o_proj", ctx)
    h2 = _rmsnorm(x1, t["mlp_norm"], block.eps)
    m = torch.nn.functional.silu(linear("gate_proj", h2)) * linear("up_proj", h2)
    out = x1 + linear("down_proj", m)
    if trace is not None:
        trace.attn = attn.detach().numpy().copy()
    return out, attn


def _as_input(block: ToyBlock, x) -> torch.Tensor:
    x = torch.as_tensor(np.asarray(x, dtype=np.float64) if not torch.is_tensor(x) else x, dtype=torch.float64)
    if x.dim() < 2 or x.shape[-1] != block.dim:
        raise ValueError(f"input must have shape (..., tokens, {block.dim}), got {tuple(x.shape)}")
    return x


def _fp_linear(block: ToyBlock, trace: Optional[ForwardTrace]) -> LinearFn:
    t = block.tensors()

    def linear(name, x):
        y = x @ t[name].T
        if trace is not None:
            trace.inputs[name] = x.detach().numpy().copy()
            trace.outputs[name] = y.detach().numpy().copy()
            trace.record(name, "GEMM")
        return y

    return linear


def forward_fp(block: ToyBlock, x) -> tuple[np.ndarray, ForwardTrace]:
    trace = ForwardTrace()
    with torch.no_grad():
        out, _ = _block_forward(block, _as_input(block, x), _fp_linear(block, trace), None, trace)
    return out.numpy(), trace


def forward_fp_torch(block: ToyBlock, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    return _block_forward(block, x, _fp_linear(block, None), None, None)


def forward_simulated(
    block: ToyBlock,
    x: torch.Tensor,
    specs: BlockSpecs,
    params: Mapping[str, torch.Tensor],
    gamma: int = 0,
    tape: Optional[RoundingTape] = None,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Quantize-dequantize forward, differentiable in ``params``.

    ``params`` may hold ``<layer>.s``, ``<layer>.alpha``, ``<layer>.beta``
    and, for the compensated layer, ``down_proj.a`` / ``down_proj.b``.
    """
    t = block.tensors()

    def linear(name, xin):
        w_spec, a_spec = specs.weight[name], specs.act[name]
        w = t[name]
        if w_spec.passthrough and a_spec.passthrough:
            return xin @ w.T
        s = params.get(f"{name}.s")
        if s is not None:
            w = w * s
            xin = xin / s
        if name == COMPENSATED_LAYER and gamma and f"{name}.a" in params:
            w = w + gamma * torch.outer(params[f"{name}.a"], params[f"{name}.b"])
        alpha = params.get(f"{name}.alpha")
        beta = params.get(f"{name}.beta")
        wq = fake_quantize(
            w, w_spec,
            alpha=None if alpha is None else alpha[:, None],
            beta=None if beta is None else beta[:, None],
            per_row=w_spec.granularity is not Granularity.PER_TENSOR,
            tape=tape,
        )
        xq = fake_quantize(xin, a_spec, per_row=a_spec.granularity is not Granularity.PER_TENSOR, tape=tape)
        return xq @ wq.T

    def kv(name, z):
        return fake_quantize(z, specs.kv, tape=tape)

    return _block_forward(block, x, linear, kv, None)


@dataclass
class EngineWeight:
    """An offline-quantized, pre-packed weight (the K x N operand, column-major)."""

    qt: QuantizedTensor
    packed: bk.BitPlaneMatrix
    balance: Optional[np.ndarray]

    @property
    def colsums(self) -> np.ndarray:
        return self.qt.codes.astype(np.int64).sum(axis=1)


def _calib_params(calib: Optional["CalibState"]) -> dict[str, np.ndarray]:
    return {} if calib is None else dict(calib.params)


def layer_weight_spec(name: str, spec: QuantSpec, params: Mapping[str, np.ndarray]) -> QuantSpec:
    """Bind calibrated balance and clip parameters to a layer's weight spec."""
    return QuantSpec(
        spec.bits, spec.scheme, spec.granularity,
        alpha=params.get(f"{name}.alpha", spec.alpha),
        beta=params.get(f"{name}.beta", spec.beta),
        balance_scale=params.get(f"{name}.s", spec.balance_scale),
    )


def layer_compensation(name: str, params: Mapping[str, np.ndarray], gamma: int) -> Optional[CompensationPair]:
    if name != COMPENSATED_LAYER or not gamma or f"{name}.a" not in params:
        return None
    return CompensationPair(params[f"{name}.a"], params[f"{name}.b"], gamma)


def prepare_engine_weights(
    block: ToyBlock, specs: BlockSpecs, calib: Optional["CalibState"] = None
) -> dict[str, EngineWeight]:
    """Quantize and BitPack every quantized layer's weights (done once, offline)."""
    params = _calib_params(calib)
    gamma = 0 if calib is None else calib.gamma
    out = {}
    for name in LINEAR_NAMES:
        w_spec, a_spec = specs.weight[name], specs.act[name]
        if w_spec.passthrough:
            continue
        spec = layer_weight_spec(name, w_spec, params)
        qt = quantize(block.weights[name], spec, layer_compensation(name, params, gamma))
        out[name] = EngineWeight(qt, bk.bitpack(qt.codes, spec.planes), spec.balance_scale)
    return out


def _engine_linear(
    block: ToyBlock,
    specs: BlockSpecs,
    weights: Mapping[str, EngineWeight],
    trace: ForwardTrace,
    tile: Optional[bk.TileConfig],
    threads: Optional[int],
) -> LinearFn:
    t = block.tensors()

    def linear(name, x):
        w_spec, a_spec = specs.weight[name], specs.act[name]
        lead = x.shape[:-1]
        x2 = x.reshape(-1, x.shape[-1]).numpy()
        trace.inputs[name] = x2.copy()
        if w_spec.passthrough and a_spec.passthrough:
            y2 = x2 @ block.weights[name].T
            trace.record(name, "GEMM")
        else:
            ew = weights.get(name)
            if ew is not None and ew.balance is not None:
                x2 = x2 / ew.balance
            if a_spec.passthrough or w_spec.passthrough:
                # weight-only or activation-only: no integer GEMM possible
                w = dequantize(ew.qt) if ew is not None else block.weights[name]
                if not a_spec.passthrough:
                    qa = quantize(x2, a_spec)
                    trace.record(name, "ReQuant")
                    trace.act_scales[name] = len(qa.scales)
                    x2 = dequantize(qa)
                y2 = x2 @ w.T
                trace.record(name, "GEMM")
            else:
                qa = quantize(x2, a_spec)
                trace.record(name, "ReQuant")
                trace.act_scales[name] = len(qa.scales)
                trace.weight_scales[name] = len(ew.qt.scales)
                packed = bk.bitpack(qa.codes, a_spec.planes)
                trace.record(name, "BitPacking")
                M, K = qa.codes.shape
                N = ew.qt.codes.shape[0]
                cfg = tile or bk.default_tile(packed.planes, ew.packed.planes, M, N, K)
                res = bk.gemm_arbitrary(packed, ew.packed, cfg, threads=threads)
                trace.record(name, "GEMM")
                corrected = bk.zero_point_correct(
                    res.acc, qa.codes.astype(np.int64).sum(axis=1), ew.colsums,
                    qa.row_zero_points(), ew.qt.row_zero_points(), K,
                )
                y2 = bk.dequantize_product(corrected, qa.row_scales(), ew.qt.row_scales())
                trace.record(name, "DeQuant")
        trace.outputs[name] = y2
        return torch.from_numpy(np.ascontiguousarray(y2)).reshape(*lead, -1)

    return linear


def forward_quant(
    block: ToyBlock,
    x,
    specs: BlockSpecs,
    calib: Optional["CalibState"] = None,
    *,
    weights: Optional[Mapping[str, EngineWeight]] = None,
    tile: Optional[bk.TileConfig] = None,
    threads: Optional[int] = None,
) -> tuple[np.ndarray, ForwardTrace]:
    """Run the block through the integer engine.

    Raises:
        AccumulatorOverflowError: when a layer's bit widths and K cannot be
            accumulated in 32 bits.
    """
    if weights is None:
        weights = prepare_engine_weights(block, specs, calib)
    trace = ForwardTrace()

    def kv(name, z):
        if specs.kv.passthrough:
            return z
        z2 = z.reshape(-1, z.shape[-1]).numpy()
        trace.record(name, "ReQuant")
        zq = dequantize(quantize(z2, specs.kv))
        return torch.from_numpy(zq).reshape(z.shape)

    with torch.no_grad():
        out, _ = _block_forward(
            block, _as_input(block, x), _engine_linear(block, specs, weights, trace, tile, threads), kv, trace
        )
    return out.numpy(), trace


def first_token_attention_share(trace_or_attn) -> float:
    """Mean attention mass that queries put on key 0, over all heads and queries."""
    attn = trace_or_attn.attn if isinstance(trace_or_attn, ForwardTrace) else trace_or_attn
    attn = np.asarray(attn)
    if attn is None or attn.ndim < 2:
        raise ValueError("no attention probabilities available")
    return float(attn[..., 0].mean())


def synthetic_tokens(dim: int, tokens: int, segments: int, seed: int) -> list[np.ndarray]:
    """Seeded Gaussian token embeddings standing in for calibration text."""
    rng = np.random.default_rng(seed)
    return [rng.standard_normal((tokens, dim)) for _ in range(segments)]
