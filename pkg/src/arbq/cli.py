"""``arbq`` command line: verify, bench, calibrate, quantize, pack, inspect."""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import re
import sys
from collections import Counter
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from arbq import bitkernel as bk
from arbq import serialization as ser
from arbq.calibration import CalibOptions, CalibrationDivergedError, calibrate_block
from arbq.quantizer import MAX_ENGINE_BITS, Scheme
from arbq.toymodel import BlockSpecs, ToyBlock, prepare_engine_weights, synthetic_tokens

log = logging.getLogger("arbq")

DEFAULT_SEED = 42
#: (K, N) weight shapes of the LLaMA-7B projections.
LLAMA7B_SHAPES = ((4096, 4096), (1024, 8192), (11008, 4096), (5120, 5120), (4096, 11008))
PRESETS = {
    "llama7b-gemv": [(1, n, k) for k, n in LLAMA7B_SHAPES],
    "llama7b-m4": [(4, n, k) for k, n in LLAMA7B_SHAPES],
    "llama7b-m8": [(8, n, k) for k, n in LLAMA7B_SHAPES],
}


class UsageError(Exception):
    pass


def parse_shape(text: str) -> tuple[int, int, int]:
    """``MxNxK`` -> (M, N, K)."""
    m = re.fullmatch(r"\s*(\d+)\s*[xX]\s*(\d+)\s*[xX]\s*(\d+)\s*", text)
    if not m or min(int(g) for g in m.groups()) < 1:
        raise UsageError(f"bad shape {text!r}, expected MxNxK with positive sizes")
    return tuple(int(g) for g in m.groups())


def parse_bits(text: str) -> tuple[int, int]:
    """``w2a8`` -> (weight bits, activation bits)."""
    m = re.fullmatch(r"w(\d+)a(\d+)", text.strip().lower())
    if not m:
        raise UsageError(f"bad bits {text!r}, expected e.g. w2a8")
    return int(m.group(1)), int(m.group(2))


def _engine_bits(w: int, a: int) -> None:
    if not (1 <= w <= MAX_ENGINE_BITS and 1 <= a <= MAX_ENGINE_BITS):
        raise UsageError(f"engine supports 1..{MAX_ENGINE_BITS} bits, got w{w}a{a}")


def _seed(args, fallback: int = DEFAULT_SEED) -> int:
    return fallback if args.seed is None else args.seed


def _write(path: Optional[str], text: str) -> None:
    if path is None:
        sys.stdout.write(text)
        return
    try:
        Path(path).write_text(text)
    except OSError as e:
        raise OSError(f"cannot write {path}: {e.strerror}") from e


def _random_codes(rng: np.random.Generator, rows: int, cols: int, bits: int) -> np.ndarray:
    return rng.integers(0, 1 << bits, size=(rows, cols), dtype=np.int64)


def cmd_verify(args) -> int:
    if args.cases < 1:
        raise UsageError("--cases must be at least 1")
    seed = _seed(args)
    rng = np.random.default_rng(seed)
    fixed_bits = parse_bits(args.bits) if args.bits else None
    fixed_shape = parse_shape(args.shape) if args.shape else None
    passed: Counter = Counter()
    total: Counter = Counter()
    failures = []
    for case in range(args.cases):
        M, N, K = fixed_shape or tuple(int(v) for v in rng.integers(1, args.max_dim + 1, size=3))
        q, p = fixed_bits or tuple(int(v) for v in rng.integers(1, 9, size=2))
        a = _random_codes(rng, M, K, p)
        w = _random_codes(rng, N, K, q)
        cands = bk.enumerate_tile_candidates(p, q, M, N, K)
        tile = cands[int(rng.integers(len(cands)))]
        got = bk.gemm_arbitrary(bk.bitpack(a, p), bk.bitpack(w, q), tile, accumulator="auto", threads=args.threads)
        total[p, q] += 1
        if np.array_equal(got.acc, a @ w.T):
            passed[p, q] += 1
        else:
            failures.append(dict(case=case, M=M, N=N, K=K, p=p, q=q, seed=seed, tile=tile.config_id))
    report = {
        "seed": seed,
        "cases": args.cases,
        "passed": sum(passed.values()),
        "per_bits": [{"p": p, "q": q, "passed": passed[p, q], "total": total[p, q]} for p, q in sorted(total)],
        "failures": failures,
    }
    lines = [f"p={r['p']} q={r['q']}: {r['passed']}/{r['total']}" for r in report["per_bits"]]
    for f in failures:
        lines.append("MISMATCH M={M} N={N} K={K} p={p} q={q} seed={seed} case={case} tile={tile}".format(**f))
    lines.append(f"{report['passed']}/{args.cases} cases exact")
    print("\n".join(lines))
    if args.emit:
        _write(args.emit, json.dumps(report, indent=2) + "\n")
    return 1 if failures else 0


def bench_shape(
    M: int, N: int, K: int, w_bits: int, a_bits: int, *, trials: int, limit: int, seed: int, threads: Optional[int]
) -> tuple[bk.TileConfig, list[bk.BenchRecord]]:
    """Autotune one shape; the first record is the naive baseline."""
    rng = np.random.default_rng(seed)
    p, q = a_bits, w_bits
    a = bk.bitpack(_random_codes(rng, M, K, p), p)
    b = bk.bitpack(_random_codes(rng, N, K, q), q)
    naive_us, reference = bk.time_median_us(lambda: bk.gemm_naive(a, b), trials)
    cands = bk.prune_candidates(bk.enumerate_tile_candidates(p, q, M, N, K), limit)
    best, records = bk.autotune(cands, a, b, trials, reference=reference, threads=threads)
    return best, [bk.BenchRecord.make("naive", None, p, q, M, N, K, naive_us)] + records


def cmd_bench(args) -> int:
    if args.preset and args.shape:
        raise UsageError("give either --shape or --preset, not both")
    if args.preset:
        if args.preset not in PRESETS:
            raise UsageError(f"unknown preset {args.preset!r}; choose from {', '.join(PRESETS)}")
        shapes = PRESETS[args.preset]
    else:
        shapes = [parse_shape(args.shape or "256x256x256")]
    w_bits, a_bits = parse_bits(args.bits)
    _engine_bits(w_bits, a_bits)
    if args.trials < 3:
        raise UsageError("--trials must be at least 3")
    records = []
    for M, N, K in shapes:
        best, recs = bench_shape(M, N, K, w_bits, a_bits, trials=args.trials, limit=args.candidates,
                                 seed=_seed(args), threads=args.threads)
        chosen = next(r for r in recs if r.config_id == best.config_id)
        print(f"{M}x{N}x{K} w{w_bits}a{a_bits}: best {best.config_id} {chosen.median_us:.1f} us "
              f"{chosen.tops:.4f} TOPS; naive {recs[0].median_us:.1f} us {recs[0].tops:.4f} TOPS")
        records += recs
    if args.emit:
        text = ser.bench_json(records) if args.emit.endswith(".json") else ser.bench_csv(records)
        _write(args.emit, text)
    return 0


def _load_block(path: Optional[str], opts: CalibOptions, seed: int) -> ToyBlock:
    if path:
        return ser.decode_block(Path(path).read_bytes())
    return ToyBlock.random(opts.dim, opts.heads, opts.hidden, seed)


def cmd_calibrate(args) -> int:
    opts = CalibOptions.from_file(args.config)
    seed = _seed(args, opts.seed)
    opts.seed = seed
    block = _load_block(args.block or opts.block_path or None, opts, seed)
    specs = opts.specs()
    data = synthetic_tokens(block.dim, opts.tokens, opts.segments, seed)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    try:
        state = calibrate_block(block, data, specs, opts)
    except CalibrationDivergedError as e:
        print(f"calibration diverged at step {e.step} (loss {e.loss})", file=sys.stderr)
        for name, v in e.snapshot.items():
            print(f"  {name}: min {v.min():.4g} max {v.max():.4g} finite {bool(np.isfinite(v).all())}", file=sys.stderr)
        return 2
    ser.save(out_dir / "calib.abqc", ser.encode_calib(state))
    _write(str(out_dir / "loss.csv"), ser.loss_csv(state.loss_history))
    print(f"initial loss {state.initial_loss:.6g}")
    print(f"final loss {state.final_loss:.6g}")
    print(f"steps {state.step}, gamma {state.gamma}, wrote {out_dir / 'calib.abqc'}")
    return 0


def cmd_quantize(args) -> int:
    w_bits, a_bits = parse_bits(args.bits)
    _engine_bits(w_bits, a_bits)
    opts = CalibOptions()
    block = _load_block(args.block, opts, _seed(args))
    specs = BlockSpecs.uniform(w_bits, a_bits, w_scheme=args.scheme)
    calib = ser.decode_calib(Path(args.calib).read_bytes()) if args.calib else None
    try:
        weights = prepare_engine_weights(block, specs, calib)
    except ValueError as e:
        raise UsageError(f"cannot apply calibration: {e}") from e
    layers = [
        ser.QuantizedLayer(name, ew.qt, ew.packed, ew.balance, a_bits, specs.act[name].scheme)
        for name, ew in weights.items()
    ]
    data = ser.encode_model(layers)
    ser.save(args.out, data)
    print(f"wrote {len(layers)} layers ({len(data)} bytes) to {args.out}")
    return 0


def cmd_pack(args) -> int:
    if args.input:
        codes = np.load(args.input)
        if not np.issubdtype(codes.dtype, np.integer):
            raise UsageError(f"{args.input}: codes must be integers, got {codes.dtype}")
    else:
        rows, cols = (int(v) for v in re.fullmatch(r"(\d+)[xX](\d+)", args.shape or "").groups()) \
            if args.shape and re.fullmatch(r"(\d+)[xX](\d+)", args.shape) else (None, None)
        if rows is None:
            raise UsageError("pack needs --input codes.npy or --shape RxC")
        codes = _random_codes(np.random.default_rng(_seed(args)), rows, cols, args.planes)
    try:
        m = bk.bitpack(codes, args.planes)
    except ValueError as e:
        raise UsageError(str(e)) from e
    ser.save(args.out, ser.encode_planes(m))
    print(f"packed {m.rows}x{m.cols} into {m.planes} planes ({m.words_per_row} words/row) -> {args.out}")
    return 0


def _summary(kind: str, obj) -> tuple[dict, list[str]]:
    if kind == "ABQT":
        c = obj.codes
        return {"kind": kind, "bits": obj.spec.bits, "scheme": obj.spec.scheme.name.lower(),
                "shape": list(c.shape), "scales": len(obj.scales),
                "code_min": int(c.min(initial=0)), "code_max": int(c.max(initial=0))}, \
            ([] if c.max(initial=0) <= obj.spec.max_code else ["codes exceed level count"])
    if kind == "ABQP":
        return {"kind": kind, "planes": obj.planes, "rows": obj.rows, "cols": obj.cols,
                "words_per_row": obj.words_per_row}, ([] if bk.padding_is_clear(obj) else ["padding bits set"])
    if kind == "ABQM":
        return {"kind": kind, "dim": obj.dim, "heads": obj.heads, "hidden": obj.hidden,
                "tensors": sorted(obj.named_tensors())}, []
    if kind == "ABQC":
        return {"kind": kind, "gamma": obj.gamma, "step": obj.step, "initial_loss": obj.initial_loss,
                "final_loss": obj.final_loss, "params": {k: len(v) for k, v in obj.params.items()}}, \
            ([] if all(np.all(v > 0) for k, v in obj.params.items() if k.endswith(".s")) else ["non-positive s"])
    layers = [{"name": l.name, "bits": l.weight.spec.bits, "scheme": l.weight.spec.scheme.name.lower(),
               "shape": list(l.weight.codes.shape), "planes": l.packed.planes, "act_bits": l.act_bits,
               "balanced": l.balance is not None} for l in obj]
    return {"kind": kind, "layers": layers}, ser.check_model(obj)


def _has_nan(obj) -> bool:
    if isinstance(obj, float):
        return not math.isfinite(obj)
    if isinstance(obj, dict):
        return any(_has_nan(v) for v in obj.values())
    if isinstance(obj, list):
        return any(_has_nan(v) for v in obj)
    return False


def cmd_inspect(args) -> int:
    kind, obj = ser.load_any(args.file)
    info, problems = _summary(kind, obj)
    info["problems"] = problems
    if _has_nan(info):
        problems.append("non-finite value in file")
        info = {"kind": kind, "problems": problems}
    text = json.dumps(info, indent=2, allow_nan=False) + "\n"
    _write(args.emit, text) if args.emit else sys.stdout.write(text)
    return 1 if problems else 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help=f"random seed (default {DEFAULT_SEED})")
    common.add_argument("--threads", type=int, default=None, help="engine worker cap (default: all CPUs)")
    common.add_argument("--emit", default=None, help="write the machine-readable report to this path")

    parser = argparse.ArgumentParser(prog="arbq", description="Arbitrary-bit quantized GEMM toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("verify", parents=[common], help="check the engine against an integer matmul oracle")
    p.add_argument("--cases", type=int, default=1000)
    p.add_argument("--max-dim", type=int, default=64)
    p.add_argument("--shape", help="fix MxNxK instead of sampling")
    p.add_argument("--bits", help="fix wQaP instead of sampling")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("bench", parents=[common], help="autotune tiles and time them against the naive kernel")
    p.add_argument("--shape", help="MxNxK")
    p.add_argument("--preset", help=f"one of {', '.join(PRESETS)}")
    p.add_argument("--bits", default="w4a4")
    p.add_argument("--trials", type=int, default=3)
    p.add_argument("--candidates", type=int, default=8, help="tile candidates timed per shape (0 = all)")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("calibrate", parents=[common], help="calibrate a toy block from a key=value config")
    p.add_argument("config")
    p.add_argument("--block", help="ABQM block file (default: generate from the seed)")
    p.add_argument("--out-dir", default=".")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("quantize", parents=[common], help="quantize and pre-pack a block's weights")
    p.add_argument("--block", help="ABQM block file (default: generate from the seed)")
    p.add_argument("--bits", default="w4a4")
    p.add_argument("--scheme", default="asymmetric", choices=[s.name.lower() for s in Scheme])
    p.add_argument("--calib", help="ABQC calibration state")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_quantize)

    p = sub.add_parser("pack", parents=[common], help="bit-pack a code matrix into an ABQP file")
    p.add_argument("--input", help=".npy integer code matrix")
    p.add_argument("--shape", help="RxC random codes when no input is given")
    p.add_argument("--planes", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pack)

    p = sub.add_parser("inspect", parents=[common], help="summarize and check any arbq binary file")
    p.add_argument("file")
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    logging.basicConfig(level=os.environ.get("ABQ_LOG", "WARNING").upper(), format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"arbq {args.command}: error: {e}", file=sys.stderr)
        return 2
    except (OSError, ser.FormatError, ValueError) as e:
        print(f"arbq {args.command}: {e}", file=sys.stderr)
        return 1
