"""Acceptance suite: one PASS/FAIL line per primary criterion.

Run with ``pytest tests/test_acceptance.py -v``; the lines are repeated in
an "acceptance criteria" section at the end of the session.
"""

import math
import time
from pathlib import Path

import numpy as np
import torch

from arbq import bitkernel as bk
from arbq.calibration import (
    CalibOptions,
    akl_loss,
    calibrate_block,
    calibration_loss,
    dlc_loss,
    init_state,
    loss_components,
    BlockOutputs,
    make_targets,
)
from arbq.fakequant import RoundingTape
from arbq.quantizer import (
    CompensationPair,
    Granularity,
    QuantSpec,
    Scheme,
    dequantize,
    quantize,
    quantize_balanced,
    signed_levels,
)
from arbq.toymodel import COMPENSATED_LAYER, BlockSpecs, ToyBlock, forward_simulated, synthetic_tokens

README = Path(__file__).resolve().parents[1] / "README.md"


def test_exact_decomposition_equivalence(criterion):
    rng = np.random.default_rng(2024)
    cases, mismatches = 1000, []
    t0 = time.perf_counter()
    for case in range(cases):
        M, N, K = (int(v) for v in rng.integers(1, 65, 3))
        p, q = (int(v) for v in rng.integers(1, 9, 2))
        a = rng.integers(0, 1 << p, (M, K), dtype=np.int64)
        w = rng.integers(0, 1 << q, (N, K), dtype=np.int64)
        cands = bk.enumerate_tile_candidates(p, q, M, N, K)
        tile = cands[int(rng.integers(len(cands)))]
        acc = bk.gemm_arbitrary(bk.bitpack(a, p), bk.bitpack(w, q), tile).acc
        if not np.array_equal(acc.astype(np.int64), a @ w.T):
            mismatches.append((M, N, K, p, q))
    elapsed = time.perf_counter() - t0
    ok = not mismatches and elapsed < 60
    criterion("exact decomposition equivalence", ok,
              f"{cases - len(mismatches)}/{cases} exact vs int64 matmul in {elapsed:.1f} s (limit 60 s)")
    assert ok, mismatches[:5]


def test_scalar_bit_stacking_identity(criterion):
    checked, bad = 0, 0
    for p in range(1, 5):
        for q in range(1, 5):
            xs = np.arange(1 << p, dtype=np.int64).reshape(-1, 1)
            ws = np.arange(1 << q, dtype=np.int64).reshape(-1, 1)
            for x in xs[:, 0]:
                for w in ws[:, 0]:
                    stacked = sum(((int(w) >> t) & 1) * ((int(x) >> s) & 1) << (s + t)
                                  for s in range(p) for t in range(q))
                    bad += stacked != int(x) * int(w)
                    checked += 1
            # the same identity through the engine: every (x, w) pair at K = 1
            tile = bk.default_tile(p, q, len(xs), len(ws), 1)
            acc = bk.gemm_arbitrary(bk.bitpack(xs, p), bk.bitpack(ws, q), tile).acc
            bad += int(np.count_nonzero(acc != xs @ ws.T))
    ok = bad == 0
    criterion("scalar bit-stacking identity", ok, f"{checked} pairs over p, q <= 4, {bad} mismatches (scalar and engine)")
    assert ok


def test_gemv_padding_figures(criterion):
    one, eight = bk.padding_redundancy(1, 1, 8), bk.padding_redundancy(1, 8, 8)
    ok = one == 0.875 and eight == 0.0
    criterion("GEMV padding figures", ok, f"padding_redundancy(1,1,8) = {one}, padding_redundancy(1,8,8) = {eight}")
    assert ok


def test_tiling_transparency(criterion):
    rng = np.random.default_rng(7)
    p, q, M, N, K = 5, 3, 256, 256, 256
    a = bk.bitpack(rng.integers(0, 1 << p, (M, K)), p)
    w = bk.bitpack(rng.integers(0, 1 << q, (N, K)), q)
    cands = bk.enumerate_tile_candidates(p, q, M, N, K)
    picks = [cands[i] for i in rng.choice(len(cands), 20, replace=False)]
    outs = [bk.gemm_arbitrary(a, w, t).acc for t in picks]
    ref = bk.gemm_naive(a, w)
    same = sum(np.array_equal(o, ref) for o in outs)
    ok = same == 20
    criterion("tiling transparency", ok, f"{same}/20 random tiles bit-identical on 256^3 W3A5")
    assert ok


def test_relative_cost_ordering(criterion):
    rng = np.random.default_rng(11)
    M, N, K = 8, 4096, 4096
    median = {}
    for bits in (2, 4, 8):
        a = bk.bitpack(rng.integers(0, 1 << bits, (M, K)), bits)
        w = bk.bitpack(rng.integers(0, 1 << bits, (N, K)), bits)
        tile = bk.default_tile(bits, bits, M, N, K)
        median[bits], _ = bk.time_median_us(lambda: bk.gemm_arbitrary(a, w, tile), 5)
    ratio = median[8] / median[2]
    ok = median[2] < median[4] < median[8] and ratio >= 2
    criterion("relative cost ordering", ok,
              f"W2A2 {median[2]:.0f} us < W4A4 {median[4]:.0f} us < W8A8 {median[8]:.0f} us, ratio {ratio:.1f} (need >= 2)")
    assert ok


def test_quantizer_properties(criterion):
    rng = np.random.default_rng(5)
    worst, elements = 0.0, 0
    while elements < 100_000:
        rows, cols = (int(v) for v in rng.integers(1, 65, 2))
        x = rng.standard_normal((rows, cols)) * 10.0 ** rng.uniform(-3, 3)
        spec = QuantSpec(int(rng.integers(1, 9)), Scheme(int(rng.integers(3))), Granularity(int(rng.integers(3))))
        q = quantize(x, spec)
        step, z = q.row_scales()[:, None], q.row_zero_points()[:, None]
        inside = (x >= -z * step) & (x <= (spec.max_code - z) * step)
        excess = (np.abs(dequantize(q) - x) / (step / 2))[inside]
        worst = max(worst, float(excess.max(initial=0.0)))
        elements += x.size
    roundtrip_ok = worst <= 1 + 1e-9

    levels = signed_levels(QuantSpec(2, Scheme.BALANCED, Granularity.PER_TENSOR)).tolist()
    codes = quantize_balanced(np.linspace(-3, 3, 601).reshape(1, -1), 2).codes - 2
    levels_ok = levels == [-2, -1, 0, 1, 2] and sorted(set(codes.ravel().tolist())) == levels

    # 10^6 samples laid out as 1000 weight channels; standard INT2 uses {-2,-1,0,1} with the same step
    x = np.random.default_rng(42).standard_normal((1000, 1000))
    bias_bal = abs(dequantize(quantize_balanced(x, 2, Granularity.PER_CHANNEL)).mean())
    bias_int2 = abs(dequantize(quantize(x, QuantSpec(2, Scheme.SYMMETRIC, Granularity.PER_CHANNEL))).mean())
    bias_ok = bias_bal < bias_int2

    ok = roundtrip_ok and levels_ok and bias_ok
    criterion("quantizer properties", ok,
              f"round-trip max err {worst:.6f} x step/2 over {elements} elements; levels {levels}; "
              f"|mean| balanced {bias_bal:.2e} < 4-level {bias_int2:.2e}")
    assert ok


def _rand_rows(rng, shape):
    z = rng.standard_normal(shape) * 10.0 ** rng.uniform(-1, 2)
    e = np.exp(z - z.max(-1, keepdims=True))
    return e / e.sum(-1, keepdims=True)


def test_loss_properties(criterion):
    rng = np.random.default_rng(9)
    failures = []
    for case in range(10_000):
        T, D = (int(v) for v in rng.integers(1, 9, 2))
        H = int(rng.integers(1, 4))
        scale = 10.0 ** rng.uniform(-3, 3)
        d = [rng.standard_normal((T, D)) * scale for _ in range(3)]
        if rng.random() < 0.05:
            d[0][int(rng.integers(T))] = 0.0
        p, r = _rand_rows(rng, (H, T, T)), _rand_rows(rng, (H, T, T))
        dlc, akl = float(dlc_loss(*d)), float(akl_loss(p, r))
        total = float(loss_components(BlockOutputs(*(torch.as_tensor(v) for v in d + [p, r])))[0])
        checks = (
            float(dlc_loss(d[1], d[1], d[1])) == 0.0,
            float(akl_loss(p, p)) == 0.0,
            dlc >= 0 and akl >= 0,
            akl == float(akl_loss(r, p)),
            total == dlc + akl,
        )
        if not all(checks):
            failures.append((case, checks))
    ok = not failures
    criterion("loss properties", ok,
              f"10000 fuzzed inputs: zero at equality, nonnegative, AKL symmetric, total = DLC + AKL; {len(failures)} failures")
    assert ok, failures[:3]


def test_gradient_fidelity(criterion):
    t0 = time.perf_counter()
    block = ToyBlock.random()
    data = synthetic_tokens(32, 16, 1, 42)
    specs = BlockSpecs.uniform(4, 4)
    rng = np.random.default_rng(0)
    st = init_state(block, specs, data, gamma=1)
    params = {k: torch.tensor(v) for k, v in st.params.items()}
    # a nonzero b and interior clip factors, so all five parameter families carry gradient
    params["down_proj.b"] = torch.tensor(rng.normal(0, 0.01, len(params["down_proj.b"])))
    for k in params:
        if k.endswith(("alpha", "beta")):
            params[k] = torch.tensor(rng.uniform(0.8, 0.95, len(params[k])))
    for v in params.values():
        v.requires_grad_(True)
    target = make_targets(block, data)[0]
    tape = RoundingTape()
    calibration_loss(block, specs, params, 1, target, tape)[0].backward()

    def loss():
        tape.replay()
        with torch.no_grad():
            return float(calibration_loss(block, specs, params, 1, target, tape)[0])

    h, worst, results = 1e-4, 0.0, []
    names = ["q_proj.s", "down_proj.s", "o_proj.alpha", "gate_proj.alpha", "k_proj.beta",
             "up_proj.beta", "down_proj.a", "down_proj.a", "down_proj.b", "down_proj.b", "v_proj.s", "down_proj.alpha"]
    for name in names:
        p = params[name]
        i = int(rng.integers(p.numel()))
        with torch.no_grad():
            p[i] += h
            up = loss()
            p[i] -= 2 * h
            down = loss()
            p[i] += h
        fd = (up - down) / (2 * h)
        err = abs(float(p.grad[i]) - fd) / abs(fd)
        worst = max(worst, err)
        results.append(err <= 1e-3)
    elapsed = time.perf_counter() - t0
    ok = all(results) and len(results) >= 10 and elapsed < 300
    criterion("gradient fidelity", ok,
              f"{sum(results)}/{len(results)} parameters across s, alpha, beta, a, b within 1e-3 "
              f"(worst rel err {worst:.1e}, h = 1e-4) in {elapsed:.1f} s")
    assert ok


def test_calibration_descent(criterion):
    specs = BlockSpecs.uniform(4, 4)
    descents = []
    for seed in range(5):
        block = ToyBlock.random(seed=seed)
        data = synthetic_tokens(32, 32, 8, seed)
        opts = CalibOptions(epochs=20, lr_s=5e-3, lr_clip=1e-2, seed=seed)
        st = calibrate_block(block, data, specs, opts)
        descents.append((st.initial_loss, st.final_loss))
    descent_ok = all(final < initial for initial, final in descents)

    block = ToyBlock.random()
    data = synthetic_tokens(32, 16, 2, 42)
    st = init_state(block, specs, data, gamma=1)
    a, b = st.params[f"{COMPENSATED_LAYER}.a"], st.params[f"{COMPENSATED_LAYER}.b"]
    w = block.weights[COMPENSATED_LAYER]
    wspec = specs.weight[COMPENSATED_LAYER]
    same_codes = np.array_equal(quantize(w, wspec, CompensationPair(a, b, 1)).codes, quantize(w, wspec).codes)
    params = {k: torch.as_tensor(v) for k, v in st.params.items()}
    with torch.no_grad():
        x = torch.as_tensor(data[0])
        same_out = torch.equal(forward_simulated(block, x, specs, params, 1)[0],
                               forward_simulated(block, x, specs, params, 0)[0])
    ok = descent_ok and same_codes and same_out and not np.any(np.outer(a, b))
    summary = ", ".join(f"{i:.4f}->{f:.4f}" for i, f in descents)
    criterion("calibration descent", ok,
              f"5/5 seeds need final < initial: {summary}; step-0 a b^T = 0 and gamma=1 output identical to gamma=0: "
              f"{same_codes and same_out}")
    assert ok


def test_not_reproducible_statement(criterion):
    text = README.read_text()
    section = "## Not reproducible here" in text
    items = all(k in text for k in ("WikiText2", "zero-shot", "TOPS", "FastTransformer"))
    ok = section and items
    criterion("not reproducible, explicitly", ok,
              "LLM perplexity/zero-shot results, GPU kernel TOPS and end-to-end latency/memory need pretrained "
              "LLMs and NVIDIA hardware; documented in README, property suites stand in")
    assert ok
