import numpy as np
import pytest

from arbq.quantizer import (
    CompensationPair,
    Granularity,
    QuantizedTensor,
    QuantSpec,
    Scheme,
    apply_balance,
    dequantize,
    quantize,
    quantize_balanced,
    signed_levels,
)

import oracles

PT, PC, PK = Granularity.PER_TENSOR, Granularity.PER_CHANNEL, Granularity.PER_TOKEN
ASYM, SYM, BAL = Scheme.ASYMMETRIC, Scheme.SYMMETRIC, Scheme.BALANCED


def test_zero_centered_value_maps_to_zero_point():
    q = quantize(np.array([[0.4]]), QuantSpec(2, ASYM, PT), scale=1.0, zero_point=2)
    assert q.codes.tolist() == [[2]]
    assert dequantize(q).tolist() == [[0.0]]


@pytest.mark.parametrize("scheme", list(Scheme))
@pytest.mark.parametrize("gran", list(Granularity))
def test_zero_tensor_is_preserved(scheme, gran):
    q = quantize(np.zeros((4, 4)), QuantSpec(3, scheme, gran))
    assert np.all(q.codes == q.row_zero_points()[:, None])
    assert np.array_equal(dequantize(q), np.zeros((4, 4)))


@pytest.mark.parametrize("scheme", ["asymmetric", "symmetric", "balanced"])
@pytest.mark.parametrize("per_row", [True, False])
def test_matches_scalar_oracle(scheme, per_row):
    x = np.random.default_rng(3).standard_normal((8, 8))
    spec = QuantSpec(4, Scheme.parse(scheme), PC if per_row else PT)
    q = quantize(x, spec)
    codes, deq = oracles.scalar_quantize(x.tolist(), 4, scheme, per_row)
    assert np.array_equal(q.codes, codes)
    assert np.array_equal(dequantize(q), deq)


def test_clip_factors_match_scalar_oracle():
    x = np.random.default_rng(4).standard_normal((6, 10))
    q = quantize(x, QuantSpec(3, ASYM, PC, alpha=0.8, beta=0.7))
    codes, deq = oracles.scalar_quantize(x.tolist(), 3, "asymmetric", True, alpha=0.8, beta=0.7)
    assert np.array_equal(q.codes, codes)
    assert np.array_equal(dequantize(q), deq)


def test_per_channel_clip_vectors():
    x = np.random.default_rng(5).standard_normal((3, 12))
    alpha = np.array([1.0, 0.5, 0.9])
    q = quantize(x, QuantSpec(4, ASYM, PC, alpha=alpha))
    for r in range(3):
        row = quantize(x[r:r + 1], QuantSpec(4, ASYM, PC, alpha=float(alpha[r])))
        assert np.array_equal(q.codes[r], row.codes[0])


def test_non_finite_input_reports_index():
    x = np.zeros((3, 3))
    x[1, 2] = np.nan
    with pytest.raises(ValueError, match=r"\(1, 2\)"):
        quantize(x, QuantSpec(4, ASYM, PC))


def test_degenerate_range_uses_unit_step():
    q = quantize(np.full((2, 3), 2.0), QuantSpec(4, ASYM, PC))
    assert q.scales.tolist() == [1.0, 1.0]
    assert q.zero_points.tolist() == [0, 0]
    assert np.all(q.codes == 2)


@pytest.mark.parametrize("kwargs", [
    dict(bits=0), dict(bits=9), dict(alpha=0.0), dict(alpha=1.5), dict(beta=-1.0),
    dict(balance_scale=np.array([1.0, 0.0])),
])
def test_spec_validation(kwargs):
    base = dict(bits=4, scheme=ASYM, granularity=PC)
    base.update(kwargs)
    with pytest.raises(ValueError):
        QuantSpec(**base)


def test_passthrough_spec():
    spec = QuantSpec(16, ASYM, PC)
    assert spec.passthrough
    with pytest.raises(ValueError):
        quantize(np.ones((2, 2)), spec)


def test_scale_count_follows_granularity():
    x = np.random.default_rng(0).standard_normal((5, 7))
    assert len(quantize(x, QuantSpec(4, ASYM, PT)).scales) == 1
    assert len(quantize(x, QuantSpec(4, ASYM, PC)).scales) == 5
    assert len(quantize(x, QuantSpec(4, ASYM, PK)).scales) == 5
    with pytest.raises(ValueError):
        QuantizedTensor(np.zeros((5, 7), np.int32), np.ones(2), np.zeros(2, np.int32), QuantSpec(4, ASYM, PC))


def test_balanced_two_bit_levels():
    assert signed_levels(QuantSpec(2, BAL, PT)).tolist() == [-2, -1, 0, 1, 2]
    assert QuantSpec(2, BAL, PT).planes == 3
    assert QuantSpec(2, SYM, PT).planes == 2


def test_balanced_rounds_to_top_level():
    q = quantize(np.array([[1.7]]), QuantSpec(2, BAL, PT), scale=1.0, zero_point=2)
    assert q.codes.tolist() == [[4]]
    assert (q.codes - q.zero_points).tolist() == [[2]]


def test_balanced_step_and_zero_point():
    x = np.array([[0.5, -3.0, 1.0], [0.0, 0.25, -0.5]])
    q = quantize_balanced(x, 2, PC)
    assert q.scales.tolist() == [1.5, 0.25]
    assert q.zero_points.tolist() == [2, 2]
    assert q.codes.min() >= 0 and q.codes.max() <= 4


def test_balanced_mirror_symmetry():
    x = np.random.default_rng(11).standard_normal((1, 1000))
    for bits in (1, 2, 3, 4):
        pos = quantize_balanced(x, bits)
        neg = quantize_balanced(-x, bits)
        z = pos.zero_points[0]
        assert np.array_equal(neg.codes, 2 * z - pos.codes)


def test_balanced_dequant_value():
    q = QuantizedTensor(np.array([[4]], np.int32), np.array([0.5]), np.array([2], np.int32), QuantSpec(2, BAL, PT))
    assert dequantize(q).tolist() == [[1.0]]


def test_apply_balance_identity_and_uniform():
    rng = np.random.default_rng(1)
    w, x = rng.standard_normal((4, 8)), rng.standard_normal((8, 4))
    w1, x1 = apply_balance(w, x, np.ones(8))
    assert np.array_equal(w1, w) and np.array_equal(x1, x)
    w2, x2 = apply_balance(w, x, np.full(8, 2.0))
    assert np.array_equal(w2, 2 * w) and np.array_equal(x2, x / 2)


def test_apply_balance_preserves_product():
    rng = np.random.default_rng(2)
    for _ in range(50):
        w, x = rng.standard_normal((4, 8)), rng.standard_normal((8, 4))
        s = rng.uniform(0.01, 100, 8)
        ws, xs = apply_balance(w, x, s)
        ref = w @ x
        assert np.abs(ws @ xs - ref).max() <= 1e-10 * np.abs(ref).max()


def test_apply_balance_rejects_nonpositive():
    with pytest.raises(ValueError, match=r"s\[3\]"):
        apply_balance(np.ones((2, 4)), np.ones((4, 2)), np.array([1.0, 1.0, 1.0, -1.0]))


def test_compensation_added_before_statistics():
    x = np.random.default_rng(6).standard_normal((4, 6))
    comp = CompensationPair(np.full(4, 0.5), np.linspace(-1, 1, 6), 1)
    spec = QuantSpec(4, ASYM, PC)
    assert np.array_equal(quantize(x, spec, comp).codes, quantize(x + comp.delta(), spec).codes)
    off = CompensationPair(np.ones(4), np.zeros(6), 1)
    assert np.array_equal(quantize(x, spec, off).codes, quantize(x, spec).codes)


@pytest.mark.parametrize("scheme", list(Scheme))
@pytest.mark.parametrize("bits", [1, 2, 3, 4, 8])
def test_round_trip_bound_and_code_range(scheme, bits):
    x = np.random.default_rng(bits).standard_normal((50, 40)) * 3
    q = quantize(x, QuantSpec(bits, scheme, PC))
    assert q.codes.min() >= 0 and q.codes.max() <= q.spec.max_code
    step = q.row_scales()[:, None]
    z = q.row_zero_points()[:, None]
    inside = (x >= (0 - z) * step) & (x <= (q.spec.max_code - z) * step)
    err = np.abs(dequantize(q) - x)
    assert np.all(err[inside] <= (step / 2 * (1 + 1e-9) * np.ones_like(x))[inside])
