"""Little-endian binary formats and CSV/JSON report emission.

Formats (all integers unsigned unless noted, all little-endian):

* ``ABQT`` quantized tensor: version u16, bits u8, scheme u8, granularity
  u8, rows u32, cols u32, scales f32[n], zero points i32[n], codes u8[rows*cols].
* ``ABQP`` bit planes: version u16, planes u8, rows u32, cols u32,
  words-per-row u32, data u64[planes*rows*words].
* ``ABQM`` block weights: version u16, heads u32, eps f64, count u32, then
  named f32 tensor records.
* ``ABQC`` calibration state: version u16, gamma u8, step u64, initial and
  final loss f64, count u32, then named f64 vector records.
* ``ABQX`` quantized model: version u16, count u32, then per layer a name,
  activation bits/scheme, an embedded ABQT, an embedded ABQP and the balance
  vector (f64, possibly empty).
"""

from __future__ import annotations

import csv
import io
import json
import math
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from arbq.bitkernel import BenchRecord, BitPlaneMatrix, bitpack
from arbq.calibration import CalibState, LossPoint
from arbq.quantizer import Granularity, QuantizedTensor, QuantSpec, Scheme
from arbq.toymodel import ToyBlock

VERSION = 1
PathLike = Union[str, Path]


class FormatError(ValueError):
    pass


class _Reader:
    def __init__(self, buf: bytes, magic: bytes):
        self.buf = memoryview(buf)
        self.pos = 0
        got = bytes(self.take(4))
        if got != magic:
            raise FormatError(f"bad magic {got!r}, expected {magic!r}")
        version = self.unpack("<H")[0]
        if version != VERSION:
            raise FormatError(f"unsupported {magic.decode()} version {version}")

    def take(self, n: int) -> memoryview:
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated input: wanted {n} bytes at offset {self.pos}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def array(self, dtype: str, count: int) -> np.ndarray:
        dt = np.dtype(dtype)
        return np.frombuffer(self.take(dt.itemsize * count), dtype=dt).copy()

    def name(self) -> str:
        (n,) = self.unpack("<H")
        return bytes(self.take(n)).decode("utf-8")

    def blob(self) -> bytes:
        (n,) = self.unpack("<I")
        return bytes(self.take(n))

    def done(self) -> None:
        if self.pos != len(self.buf):
            raise FormatError(f"{len(self.buf) - self.pos} trailing bytes")


def _name(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<H", len(raw)) + raw


def _blob(b: bytes) -> bytes:
    return struct.pack("<I", len(b)) + b


def encode_quantized(q: QuantizedTensor) -> bytes:
    if q.spec.passthrough or q.codes.max(initial=0) > 255:
        raise FormatError(f"codes of a {q.spec.bits}-bit {q.spec.scheme.name.lower()} tensor do not fit one byte")
    rows, cols = q.codes.shape
    head = struct.pack("<4sHBBBII", b"ABQT", VERSION, q.spec.bits, int(q.spec.scheme), int(q.spec.granularity), rows, cols)
    return (
        head
        + q.scales.astype("<f4").tobytes()
        + q.zero_points.astype("<i4").tobytes()
        + q.codes.astype(np.uint8).tobytes()
    )


def decode_quantized(buf: bytes) -> QuantizedTensor:
    r = _Reader(buf, b"ABQT")
    bits, scheme, gran, rows, cols = r.unpack("<BBBII")
    spec = QuantSpec(bits, Scheme(scheme), Granularity(gran))
    n = 1 if spec.granularity is Granularity.PER_TENSOR else rows
    scales = r.array("<f4", n).astype(np.float64)
    zps = r.array("<i4", n).astype(np.int32)
    codes = r.array("u1", rows * cols).astype(np.int32).reshape(rows, cols)
    r.done()
    return QuantizedTensor(codes, scales, zps, spec)


def encode_planes(m: BitPlaneMatrix) -> bytes:
    head = struct.pack("<4sHBIII", b"ABQP", VERSION, m.planes, m.rows, m.cols, m.words_per_row)
    return head + m.data.astype("<u8").tobytes()


def decode_planes(buf: bytes) -> BitPlaneMatrix:
    r = _Reader(buf, b"ABQP")
    planes, rows, cols, words = r.unpack("<BIII")
    data = r.array("<u8", planes * rows * words).astype(np.uint64).reshape(planes, rows, words)
    r.done()
    return BitPlaneMatrix(planes, rows, cols, data)


def encode_block(block: ToyBlock) -> bytes:
    tensors = block.named_tensors()
    out = [struct.pack("<4sHIdI", b"ABQM", VERSION, block.heads, block.eps, len(tensors))]
    for name, t in tensors.items():
        t = np.asarray(t)
        out.append(_name(name) + struct.pack(f"<B{t.ndim}I", t.ndim, *t.shape) + t.astype("<f4").tobytes())
    return b"".join(out)


def decode_block(buf: bytes) -> ToyBlock:
    r = _Reader(buf, b"ABQM")
    heads, eps, count = r.unpack("<IdI")
    tensors = {}
    for _ in range(count):
        name = r.name()
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I")
        tensors[name] = r.array("<f4", int(np.prod(shape))).astype(np.float64).reshape(shape)
    r.done()
    try:
        attn_norm, mlp_norm = tensors.pop("attn_norm"), tensors.pop("mlp_norm")
        hidden = tensors["gate_proj"].shape[0]
    except KeyError as e:
        raise FormatError(f"block file lacks tensor {e}") from None
    return ToyBlock(attn_norm.shape[0], heads, hidden, tensors, attn_norm, mlp_norm, eps)


def encode_calib(state: CalibState) -> bytes:
    records: list[tuple[str, np.ndarray]] = list(state.params.items())
    records += [(f"exp_avg/{k}", v) for k, v in state.exp_avg.items()]
    records += [(f"exp_avg_sq/{k}", v) for k, v in state.exp_avg_sq.items()]
    hist = np.array([[p.step, p.loss, p.dlc, p.akl] for p in state.loss_history], dtype=np.float64)
    records.append(("loss_history", hist.reshape(-1)))
    out = [struct.pack("<4sHBQddI", b"ABQC", VERSION, state.gamma, state.step,
                       state.initial_loss, state.final_loss, len(records))]
    for name, v in records:
        v = np.asarray(v, dtype="<f8").reshape(-1)
        out.append(_name(name) + struct.pack("<I", v.size) + v.tobytes())
    return b"".join(out)


def decode_calib(buf: bytes) -> CalibState:
    r = _Reader(buf, b"ABQC")
    gamma, step, initial, final, count = r.unpack("<BQddI")
    state = CalibState(gamma=gamma, step=step, initial_loss=initial, final_loss=final)
    for _ in range(count):
        name = r.name()
        (n,) = r.unpack("<I")
        v = r.array("<f8", n)
        if name == "loss_history":
            state.loss_history = [LossPoint(int(s), l, d, a) for s, l, d, a in v.reshape(-1, 4)]
        elif name.startswith("exp_avg_sq/"):
            state.exp_avg_sq[name.split("/", 1)[1]] = v
        elif name.startswith("exp_avg/"):
            state.exp_avg[name.split("/", 1)[1]] = v
        else:
            state.params[name] = v
    r.done()
    return state


@dataclass
class QuantizedLayer:
    name: str
    weight: QuantizedTensor
    packed: BitPlaneMatrix
    balance: Optional[np.ndarray]
    act_bits: int
    act_scheme: Scheme


def encode_model(layers: Sequence[QuantizedLayer]) -> bytes:
    out = [struct.pack("<4sHI", b"ABQX", VERSION, len(layers))]
    for layer in layers:
        bal = np.zeros(0) if layer.balance is None else np.asarray(layer.balance)
        out.append(
            _name(layer.name)
            + struct.pack("<BB", layer.act_bits, int(layer.act_scheme))
            + _blob(encode_quantized(layer.weight))
            + _blob(encode_planes(layer.packed))
            + struct.pack("<I", bal.size) + bal.astype("<f8").tobytes()
        )
    return b"".join(out)


def decode_model(buf: bytes) -> list[QuantizedLayer]:
    r = _Reader(buf, b"ABQX")
    (count,) = r.unpack("<I")
    layers = []
    for _ in range(count):
        name = r.name()
        act_bits, act_scheme = r.unpack("<BB")
        weight = decode_quantized(r.blob())
        packed = decode_planes(r.blob())
        (n,) = r.unpack("<I")
        bal = r.array("<f8", n) if n else None
        layers.append(QuantizedLayer(name, weight, packed, bal, act_bits, Scheme(act_scheme)))
    r.done()
    return layers


def check_model(layers: Sequence[QuantizedLayer]) -> list[str]:
    """Code-range and repack checks; returns a list of problems (empty when sound)."""
    problems = []
    for layer in layers:
        codes, spec = layer.weight.codes, layer.weight.spec
        if codes.min(initial=0) < 0 or codes.max(initial=0) > spec.max_code:
            problems.append(f"{layer.name}: codes outside [0, {spec.max_code}]")
            continue
        repacked = bitpack(codes, layer.packed.planes)
        if not np.array_equal(repacked.data, layer.packed.data):
            problems.append(f"{layer.name}: stored planes differ from bitpack(codes)")
        if not np.all(layer.weight.scales > 0):
            problems.append(f"{layer.name}: non-positive scale")
    return problems


MAGICS = {b"ABQT": decode_quantized, b"ABQP": decode_planes, b"ABQM": decode_block,
          b"ABQC": decode_calib, b"ABQX": decode_model}


def load_any(path: PathLike):
    buf = Path(path).read_bytes()
    decoder = MAGICS.get(buf[:4])
    if decoder is None:
        raise FormatError(f"{path}: unknown file magic {buf[:4]!r}")
    return buf[:4].decode(), decoder(buf)


def save(path: PathLike, data: bytes) -> None:
    Path(path).write_bytes(data)


def _finite(values) -> None:
    for v in values:
        if isinstance(v, float) and not math.isfinite(v):
            raise ValueError("refusing to emit a non-finite value")


def loss_csv(history: Sequence[LossPoint]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", "loss", "dlc", "akl"])
    for p in history:
        _finite([p.loss, p.dlc, p.akl])
        w.writerow([p.step, repr(p.loss), repr(p.dlc), repr(p.akl)])
    return buf.getvalue()


def parse_loss_csv(text: str) -> list[LossPoint]:
    return [LossPoint(int(r["step"]), float(r["loss"]), float(r["dlc"]), float(r["akl"]))
            for r in csv.DictReader(io.StringIO(text))]


def bench_csv(records: Sequence[BenchRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(BenchRecord.FIELDS)
    for rec in records:
        row = [getattr(rec, f) for f in BenchRecord.FIELDS]
        _finite(row)
        w.writerow([repr(v) if isinstance(v, float) else v for v in row])
    return buf.getvalue()


def _typed(rec: dict) -> BenchRecord:
    kinds = {f.name: f.type for f in fields(BenchRecord)}
    vals = {}
    for k in BenchRecord.FIELDS:
        kind = kinds[k]
        vals[k] = rec[k] if kind == "str" else (float(rec[k]) if kind == "float" else int(rec[k]))
    return BenchRecord(**vals)


def parse_bench_csv(text: str) -> list[BenchRecord]:
    return [_typed(r) for r in csv.DictReader(io.StringIO(text))]


def bench_json(records: Sequence[BenchRecord]) -> str:
    rows = [{k: asdict(r)[k] for k in BenchRecord.FIELDS} for r in records]
    for row in rows:
        _finite(row.values())
    return json.dumps(rows, indent=2, allow_nan=False) + "\n"


def parse_bench_json(text: str) -> list[BenchRecord]:
    return [_typed(r) for r in json.loads(text)]
