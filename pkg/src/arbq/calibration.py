"""Block-wise calibration of balance, clipping and compensation parameters.

The objective is the sum of a double log-cosine loss on block outputs (DLC)
and a symmetric KL divergence between quantized and full-precision attention
maps (AKL). Gradients reach the parameters through straight-through
rounding; AdamW without weight decay does the updates.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence, Union

import numpy as np
import torch

from arbq.fakequant import RoundingTape
from arbq.toymodel import (
    COMPENSATED_LAYER,
    BlockSpecs,
    ToyBlock,
    forward_fp,
    forward_fp_torch,
    forward_simulated,
)

log = logging.getLogger(__name__)

COS_EPS = 1e-8
PROB_FLOOR = 1e-10
ROW_SUM_TOL = 1e-6
S_FLOOR = 1e-5
CLIP_FLOOR = 1e-2
ADAM_BETAS = (0.9, 0.999)


class CalibrationDivergedError(RuntimeError):
    def __init__(self, step: int, loss: float, snapshot: dict[str, np.ndarray]):
        super().__init__(f"non-finite calibration loss {loss} at step {step}")
        self.step = step
        self.loss = loss
        self.snapshot = snapshot


def _tensor(x) -> torch.Tensor:
    if torch.is_tensor(x):
        return x if x.dtype == torch.float64 else x.to(torch.float64)
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def _row_cosine(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    a = a.reshape(-1, a.shape[-1])
    b = b.reshape(-1, b.shape[-1])
    num = (a * b).sum(-1)
    den = torch.sqrt(torch.clamp_min((a * a).sum(-1) * (b * b).sum(-1), 1e-300))
    zero = ((a == 0).all(-1) | (b == 0).all(-1)).detach()
    if zero.any():
        log.warning("DLC: %d zero-norm token rows, cosine floored at %g", int(zero.sum()), COS_EPS)
    cos = torch.where(zero, torch.full_like(num, COS_EPS), num / den)
    cos = torch.where((a == b).all(-1).detach() & ~zero, torch.ones_like(cos), cos)
    return torch.clamp(cos, COS_EPS, 1.0)


def dlc_loss(d_q, d_fp, d_fp_star) -> torch.Tensor:
    """Mean over tokens of ``-log cos(d_q, d_fp) - log cos(d_q, d_fp*)``."""
    d_q, d_fp, d_fp_star = _tensor(d_q), _tensor(d_fp), _tensor(d_fp_star)
    if not (d_q.shape == d_fp.shape == d_fp_star.shape):
        raise ValueError(f"DLC operands differ in shape: {d_q.shape}, {d_fp.shape}, {d_fp_star.shape}")
    loss = -torch.log(_row_cosine(d_q, d_fp)) - torch.log(_row_cosine(d_q, d_fp_star))
    return loss.mean()


def _floored(p: torch.Tensor) -> torch.Tensor:
    p = torch.clamp_min(p, PROB_FLOOR)
    return p / p.sum(-1, keepdim=True)


def _check_stochastic(p: torch.Tensor, name: str) -> None:
    with torch.no_grad():
        if (p < 0).any() or ((p.sum(-1) - 1).abs() > ROW_SUM_TOL).any():
            raise ValueError(f"{name} rows are not probability distributions (tolerance {ROW_SUM_TOL})")


def akl_loss(attn_q, attn_fp) -> torch.Tensor:
    """``KL(q || fp) + KL(fp || q)`` per attention row, averaged over all rows."""
    attn_q, attn_fp = _tensor(attn_q), _tensor(attn_fp)
    if attn_q.shape != attn_fp.shape:
        raise ValueError(f"attention shapes differ: {attn_q.shape} vs {attn_fp.shape}")
    _check_stochastic(attn_q, "attn_q")
    _check_stochastic(attn_fp, "attn_fp")
    p, r = _floored(attn_q), _floored(attn_fp)
    log_ratio = torch.log(p) - torch.log(r)
    return ((p - r) * log_ratio).sum(-1).mean()


@dataclass
class BlockOutputs:
    d_q: torch.Tensor
    d_fp: torch.Tensor
    d_fp_star: torch.Tensor
    attn_q: torch.Tensor
    attn_fp: torch.Tensor


def loss_components(outputs: BlockOutputs) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    dlc = dlc_loss(outputs.d_q, outputs.d_fp, outputs.d_fp_star)
    akl = akl_loss(outputs.attn_q, outputs.attn_fp)
    return dlc + akl, dlc, akl


def total_loss(outputs: BlockOutputs) -> torch.Tensor:
    return loss_components(outputs)[0]


@dataclass
class LossPoint:
    step: int
    loss: float
    dlc: float
    akl: float


@dataclass
class CalibState:
    """Learned parameters (named ``<layer>.s|alpha|beta|a|b``) and optimizer state."""

    params: dict[str, np.ndarray] = field(default_factory=dict)
    gamma: int = 0
    exp_avg: dict[str, np.ndarray] = field(default_factory=dict)
    exp_avg_sq: dict[str, np.ndarray] = field(default_factory=dict)
    loss_history: list[LossPoint] = field(default_factory=list)
    step: int = 0
    initial_loss: float = 0.0
    final_loss: float = 0.0

    def s(self, layer: str) -> Optional[np.ndarray]:
        return self.params.get(f"{layer}.s")

    def compensation_product(self) -> Optional[np.ndarray]:
        a = self.params.get(f"{COMPENSATED_LAYER}.a")
        if a is None:
            return None
        return self.gamma * np.outer(a, self.params[f"{COMPENSATED_LAYER}.b"])


@dataclass
class CalibOptions:
    epochs: int = 20
    lr_s: float = 5e-3
    lr_clip: float = 1e-2
    batch: int = 1
    seed: int = 42
    bits_w: int = 4
    bits_a: int = 4
    scheme: str = "asymmetric"
    gamma_blocks: str = "0,last"
    block_index: int = 0
    num_blocks: int = 1
    segments: int = 128
    tokens: int = 32
    dim: int = 32
    heads: int = 4
    hidden: int = 86
    block_path: str = ""
    migration: float = 0.5

    def gamma(self) -> int:
        last = self.num_blocks - 1
        chosen = set()
        for tok in self.gamma_blocks.replace(" ", "").split(","):
            if not tok:
                continue
            if tok == "last":
                chosen.add(last)
            else:
                i = int(tok)
                chosen.add(i if i >= 0 else self.num_blocks + i)
        return int(self.block_index in chosen)

    def specs(self) -> BlockSpecs:
        return BlockSpecs.uniform(self.bits_w, self.bits_a, w_scheme=self.scheme)

    @classmethod
    def from_mapping(cls, values: Mapping[str, str]) -> "CalibOptions":
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            if key not in known:
                raise ValueError(f"unknown calibration option {key!r}")
            typ = type(getattr(cls(), key))
            kwargs[key] = typ(raw) if typ is not str else str(raw)
        opts = cls(**kwargs)
        if opts.epochs < 0 or opts.batch < 1 or opts.segments < 1 or opts.tokens < 1:
            raise ValueError("epochs must be >= 0; batch, segments and tokens >= 1")
        return opts

    @classmethod
    def from_file(cls, path: Union[str, Path]) -> "CalibOptions":
        return cls.from_mapping(parse_key_values(Path(path).read_text()))


def parse_key_values(text: str) -> dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment, optional quotes are stripped."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value, got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        out[key] = value.strip("'\"")
    return out


def smoothquant_scales(
    block: ToyBlock, samples: Sequence[np.ndarray], layers: Iterable[str], migration: float = 0.5
) -> dict[str, np.ndarray]:
    """``s_j = max|X_j|^m / max|W_j|^(1-m)`` from full-precision activations."""
    act_max: dict[str, np.ndarray] = {}
    for x in samples:
        _, trace = forward_fp(block, x)
        for name in layers:
            m = np.abs(trace.inputs[name]).reshape(-1, trace.inputs[name].shape[-1]).max(axis=0)
            act_max[name] = m if name not in act_max else np.maximum(act_max[name], m)
    out = {}
    for name in layers:
        w_max = np.abs(block.weights[name]).max(axis=0)
        s = np.power(np.maximum(act_max[name], 1e-12), migration) / np.power(np.maximum(w_max, 1e-12), 1 - migration)
        out[name] = np.clip(s, S_FLOOR, 1e5)
    return out


def init_state(
    block: ToyBlock, specs: BlockSpecs, samples: Sequence[np.ndarray], gamma: int, migration: float = 0.5
) -> CalibState:
    """Balance vectors from activation statistics, clip factors 1, ``a`` ones and ``b`` zeros."""
    layers = specs.quantized_layers()
    params: dict[str, np.ndarray] = {}
    for name, s in smoothquant_scales(block, samples, layers, migration).items():
        params[f"{name}.s"] = s
    for name in layers:
        if specs.weight[name].passthrough:
            continue
        out_features = block.weights[name].shape[0]
        params[f"{name}.alpha"] = np.ones(out_features)
        params[f"{name}.beta"] = np.ones(out_features)
    if gamma and COMPENSATED_LAYER in layers and not specs.weight[COMPENSATED_LAYER].passthrough:
        out_features, in_features = block.weights[COMPENSATED_LAYER].shape
        params[f"{COMPENSATED_LAYER}.a"] = np.ones(out_features)
        params[f"{COMPENSATED_LAYER}.b"] = np.zeros(in_features)
    return CalibState(params=params, gamma=gamma)


@dataclass
class _Target:
    x_q: torch.Tensor
    d_fp: torch.Tensor
    d_fp_star: torch.Tensor
    attn_fp: torch.Tensor


def make_targets(
    block: ToyBlock, inputs_fp: Sequence[np.ndarray], inputs_q: Optional[Sequence[np.ndarray]] = None
) -> list[_Target]:
    """Full-precision references for each calibration sample."""
    inputs_q = inputs_fp if inputs_q is None else inputs_q
    if len(inputs_q) != len(inputs_fp):
        raise ValueError("quantized-path inputs must pair with full-precision inputs")
    out = []
    with torch.no_grad():
        for x, xq in zip(inputs_fp, inputs_q):
            x, xq = _tensor(x), _tensor(xq)
            d_fp, attn_fp = forward_fp_torch(block, x)
            d_fp_star = d_fp if xq is x else forward_fp_torch(block, xq)[0]
            out.append(_Target(xq, d_fp, d_fp_star, attn_fp))
    return out


def _stack(targets: Sequence[_Target]) -> _Target:
    if len(targets) == 1:
        return targets[0]
    return _Target(*(torch.stack([getattr(t, f.name) for t in targets]) for f in fields(_Target)))


def calibration_loss(
    block: ToyBlock,
    specs: BlockSpecs,
    params: Mapping[str, torch.Tensor],
    gamma: int,
    target: _Target,
    tape: Optional[RoundingTape] = None,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Total, DLC and AKL loss of the simulated quantized block on one (batched) target."""
    d_q, attn_q = forward_simulated(block, target.x_q, specs, params, gamma, tape)
    return loss_components(BlockOutputs(d_q, target.d_fp, target.d_fp_star, attn_q, target.attn_fp))


def evaluate(block: ToyBlock, specs: BlockSpecs, state: CalibState, targets: Sequence[_Target]) -> float:
    params = {k: torch.as_tensor(v) for k, v in state.params.items()}
    with torch.no_grad():
        losses = [float(calibration_loss(block, specs, params, state.gamma, t)[0]) for t in targets]
    return float(np.mean(losses))


def _project(params: Mapping[str, torch.Tensor]) -> None:
    with torch.no_grad():
        for name, p in params.items():
            if name.endswith(".s"):
                p.clamp_(min=S_FLOOR)
            elif name.endswith(".alpha") or name.endswith(".beta"):
                p.clamp_(CLIP_FLOOR, 1.0)


def calibrate_block(
    block: ToyBlock,
    calib_data: Sequence[np.ndarray],
    specs: BlockSpecs,
    opts: CalibOptions,
    *,
    quant_inputs: Optional[Sequence[np.ndarray]] = None,
    state: Optional[CalibState] = None,
) -> CalibState:
    """Learn balance, clip and compensation parameters for one block.

    Args:
        calib_data: full-precision block inputs, each (tokens, dim).
        quant_inputs: matching inputs produced by the quantized upstream
            model; defaults to ``calib_data`` (first block).
        state: starting parameters; initialized from ``calib_data`` if absent.

    Raises:
        CalibrationDivergedError: a step produced a non-finite loss.
    """
    if not calib_data:
        raise ValueError("calibration data is empty")
    if state is None:
        state = init_state(block, specs, calib_data, opts.gamma(), opts.migration)
    targets = make_targets(block, calib_data, quant_inputs)
    state.initial_loss = evaluate(block, specs, state, targets)
    if specs.passthrough:
        state.loss_history = [LossPoint(0, state.initial_loss, state.initial_loss, 0.0)]
        state.final_loss = state.initial_loss
        return state

    params = {k: torch.tensor(v, dtype=torch.float64, requires_grad=True) for k, v in state.params.items()}
    groups = [
        {"params": [p for k, p in params.items() if k.endswith(".s")], "lr": opts.lr_s},
        {"params": [p for k, p in params.items() if not k.endswith(".s")], "lr": opts.lr_clip},
    ]
    optim = torch.optim.AdamW([g for g in groups if g["params"]], betas=ADAM_BETAS, weight_decay=0.0)
    rng = np.random.default_rng(opts.seed)
    step = state.step
    for epoch in range(opts.epochs):
        order = rng.permutation(len(targets))
        for start in range(0, len(order), opts.batch):
            batch = _stack([targets[i] for i in order[start:start + opts.batch]])
            optim.zero_grad()
            total, dlc, akl = calibration_loss(block, specs, params, state.gamma, batch)
            value = float(total.detach())
            if not math.isfinite(value):
                snapshot = {k: p.detach().numpy().copy() for k, p in params.items()}
                raise CalibrationDivergedError(step, value, snapshot)
            state.loss_history.append(LossPoint(step, value, float(dlc.detach()), float(akl.detach())))
            total.backward()
            optim.step()
            _project(params)
            step += 1
        log.info("epoch %d: last loss %.6g", epoch, state.loss_history[-1].loss)

    state.params = {k: p.detach().numpy().copy() for k, p in params.items()}
    for k, p in params.items():
        st = optim.state.get(p, {})
        if "exp_avg" in st:
            state.exp_avg[k] = st["exp_avg"].numpy().copy()
            state.exp_avg_sq[k] = st["exp_avg_sq"].numpy().copy()
    state.step = step
    state.final_loss = evaluate(block, specs, state, targets)
    return state
