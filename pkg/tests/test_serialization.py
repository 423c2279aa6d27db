import struct

import numpy as np
import pytest

from arbq import bitkernel as bk
from arbq import serialization as ser
from arbq.calibration import CalibOptions, calibrate_block
from arbq.quantizer import Granularity, QuantSpec, Scheme, quantize
from arbq.toymodel import BlockSpecs, ToyBlock, forward_fp, prepare_engine_weights, synthetic_tokens


def test_quantized_tensor_round_trip():
    x = np.random.default_rng(0).standard_normal((5, 9))
    q = quantize(x, QuantSpec(3, Scheme.BALANCED, Granularity.PER_CHANNEL))
    buf = ser.encode_quantized(q)
    assert buf[:4] == b"ABQT"
    assert struct.unpack_from("<HBBBII", buf, 4) == (1, 3, 2, 1, 5, 9)
    back = ser.decode_quantized(buf)
    assert np.array_equal(back.codes, q.codes)
    assert np.array_equal(back.zero_points, q.zero_points)
    assert np.array_equal(back.scales, q.scales.astype(np.float32).astype(np.float64))
    assert back.spec.scheme is Scheme.BALANCED and back.spec.granularity is Granularity.PER_CHANNEL


def test_per_tensor_header_sizes():
    q = quantize(np.ones((3, 4)), QuantSpec(2, Scheme.ASYMMETRIC, Granularity.PER_TENSOR))
    assert len(ser.encode_quantized(q)) == 4 + 2 + 3 + 8 + 4 + 4 + 12


def test_wide_balanced_codes_rejected():
    q = quantize(np.linspace(-1, 1, 8).reshape(1, 8), QuantSpec(8, Scheme.BALANCED, Granularity.PER_TENSOR))
    with pytest.raises(ser.FormatError):
        ser.encode_quantized(q)


def test_planes_round_trip():
    m = bk.bitpack(np.random.default_rng(1).integers(0, 32, (17, 130)), 5)
    buf = ser.encode_planes(m)
    assert struct.unpack_from("<4sHBIII", buf) == (b"ABQP", 1, 5, 17, 130, 3)
    assert len(buf) == 4 + 2 + 1 + 12 + 5 * 17 * 3 * 8
    back = ser.decode_planes(buf)
    assert np.array_equal(back.data, m.data)


def test_corrupt_inputs():
    m = bk.bitpack(np.ones((2, 2), np.int64), 1)
    buf = ser.encode_planes(m)
    with pytest.raises(ser.FormatError, match="truncated"):
        ser.decode_planes(buf[:-1])
    with pytest.raises(ser.FormatError, match="magic"):
        ser.decode_planes(b"XXXX" + buf[4:])
    with pytest.raises(ser.FormatError, match="trailing"):
        ser.decode_planes(buf + b"\0")


def test_block_round_trip():
    block = ToyBlock.random(seed=3)
    back = ser.decode_block(ser.encode_block(block))
    assert (back.dim, back.heads, back.hidden) == (block.dim, block.heads, block.hidden)
    for name, w in block.weights.items():
        assert np.array_equal(back.weights[name], w.astype(np.float32).astype(np.float64))
    x = np.random.default_rng(0).standard_normal((4, 32))
    assert np.allclose(forward_fp(back, x)[0], forward_fp(block, x)[0], rtol=1e-5, atol=1e-5)


def test_calib_state_round_trip():
    block = ToyBlock.random()
    st = calibrate_block(block, synthetic_tokens(32, 8, 2, 0), BlockSpecs.uniform(4, 4), CalibOptions(epochs=1))
    back = ser.decode_calib(ser.encode_calib(st))
    assert back.gamma == st.gamma and back.step == st.step
    assert back.initial_loss == st.initial_loss and back.final_loss == st.final_loss
    for d1, d2 in [(back.params, st.params), (back.exp_avg, st.exp_avg), (back.exp_avg_sq, st.exp_avg_sq)]:
        assert set(d1) == set(d2) and all(np.array_equal(d1[k], d2[k]) for k in d2)
    assert back.loss_history == st.loss_history


def test_model_round_trip_and_checks():
    block = ToyBlock.random()
    specs = BlockSpecs.uniform(3, 4)
    weights = prepare_engine_weights(block, specs)
    layers = [ser.QuantizedLayer(n, ew.qt, ew.packed, ew.balance, 4, Scheme.ASYMMETRIC) for n, ew in weights.items()]
    back = ser.decode_model(ser.encode_model(layers))
    assert [l.name for l in back] == [l.name for l in layers]
    assert ser.check_model(back) == []
    back[0].packed.data[0, 0, 0] ^= np.uint64(1)
    assert "stored planes differ" in ser.check_model(back)[0]


def test_loss_csv_round_trip():
    from arbq.calibration import LossPoint

    hist = [LossPoint(0, 0.1234567890123, 0.1, 0.0234567890123), LossPoint(1, 1e-300, 0.0, 1e-300)]
    text = ser.loss_csv(hist)
    assert text.splitlines()[0] == "step,loss,dlc,akl"
    assert ser.parse_loss_csv(text) == hist
    with pytest.raises(ValueError):
        ser.loss_csv([LossPoint(0, float("nan"), 0.0, 0.0)])


def test_bench_csv_and_json_round_trip():
    recs = [
        bk.BenchRecord.make("naive", None, 2, 3, 8, 64, 256, 123.456),
        bk.BenchRecord.make("BM8-BN8-BK256-WM16-WN24", bk.TileConfig(8, 8, 256, 16, 24), 2, 3, 8, 64, 256, 7.125),
    ]
    text = ser.bench_csv(recs)
    assert text.splitlines()[0] == "config_id,BM,BN,BK,WM,WN,p,q,M,N,K,median_us,tops"
    assert ser.parse_bench_csv(text) == recs
    assert ser.parse_bench_json(ser.bench_json(recs)) == recs
