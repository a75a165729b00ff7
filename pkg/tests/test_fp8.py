import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nanoprune.config import TinyDefaults
from nanoprune.fp8 import (DECODE_TABLE, E4M3_MAX, decode, e4m3_round, fp8_matmul_sim,
                           linear_layer_names, quantize, quantize_checkpoint, roundtrip)
from nanoprune.model import init_checkpoint


def reference_value(code: int) -> float:
    """E4M3 without infinities: 1 sign, 4 exponent (bias 7), 3 mantissa bits; S.1111.111 is NaN."""
    s, e, m = code >> 7, (code >> 3) & 15, code & 7
    if e == 15 and m == 7:
        return math.nan
    mag = (m / 8) * 2.0**-6 if e == 0 else (1 + m / 8) * 2.0 ** (e - 7)
    return -mag if s else mag


def test_exhaustive_code_table():
    for code in range(256):
        want = reference_value(code)
        got = DECODE_TABLE[code]
        if math.isnan(want):
            assert math.isnan(got) and code in (0x7F, 0xFF)
        else:
            assert got == want, hex(code)
    finite = DECODE_TABLE[~np.isnan(DECODE_TABLE)]
    assert finite.max() == 448.0 and finite.min() == -448.0
    assert DECODE_TABLE[1] == 2.0**-9  # smallest subnormal
    assert not np.any(np.isinf(DECODE_TABLE))


def test_every_finite_code_roundtrips():
    for code in range(256):
        if code in (0x7F, 0xFF):
            continue
        v = DECODE_TABLE[code]
        back = e4m3_round(v)
        assert DECODE_TABLE[back] == v  # +0 and -0 compare equal


def test_nan_never_produced_and_rejected():
    codes = e4m3_round(np.linspace(-1e6, 1e6, 10001))
    assert not np.any((codes == 0x7F) | (codes == 0xFF))
    with pytest.raises(ValueError):
        e4m3_round(np.array([1.0, np.nan]))


def test_saturation():
    assert decode(e4m3_round(1e9)) == 448.0
    assert decode(e4m3_round(-500.0)) == -448.0
    assert decode(e4m3_round(np.inf)) == 448.0


def test_ties_round_to_even_mantissa():
    # 1.0 (mantissa 0) and 1.125 (mantissa 1): midpoint goes to 1.0
    assert decode(e4m3_round(1.0625)) == 1.0
    # 1.125 and 1.25 (mantissa 2): midpoint goes to 1.25
    assert decode(e4m3_round(1.1875)) == 1.25
    # subnormal midpoint between 0 and 2^-9 goes to 0
    assert decode(e4m3_round(2.0**-10)) == 0.0


@settings(max_examples=300, deadline=None)
@given(st.floats(2.0**-6, 448.0), st.booleans())
def test_normal_range_relative_error(x, neg):
    v = -x if neg else x
    assert abs(roundtrip(v) - v) <= 2.0**-4 * abs(v)


@settings(max_examples=200, deadline=None)
@given(st.floats(-448.0, 448.0))
def test_rounding_picks_nearest(x):
    r = float(roundtrip(x))
    finite = DECODE_TABLE[~np.isnan(DECODE_TABLE)]
    assert abs(r - x) <= np.min(np.abs(finite - x)) + 1e-300


def test_quantize_idempotent_on_random_blocks():
    rng = np.random.default_rng(0)
    for k in range(100):
        x = rng.normal(scale=10 ** rng.uniform(-3, 3), size=(128, 128))
        once = quantize(x).dequantize()
        twice = quantize(once).dequantize()
        np.testing.assert_array_equal(once, twice)


def test_block_scales():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(200, 300))
    x[:128, :128] = 0.0
    q = quantize(x, "weight-block")
    assert q.scales.shape == (2, 3)
    assert q.scales[0, 0] == 1.0
    np.testing.assert_allclose(q.scales[1, 2], np.abs(x[128:, 256:]).max() / E4M3_MAX)
    # the block maximum is represented exactly
    deq = q.dequantize()
    blk = (slice(128, 200), slice(256, 300))
    i = np.unravel_index(np.argmax(np.abs(x[blk])), x[blk].shape)
    assert deq[blk][i] == pytest.approx(x[blk][i], rel=1e-15)


def test_activation_tiles():
    x = np.random.default_rng(2).normal(size=(3, 5, 260))
    q = quantize(x, "activation-tile")
    assert q.scales.shape == (15, 3)
    assert q.dequantize().shape == x.shape


def test_quantize_rejects_bad_input():
    with pytest.raises(ValueError):
        quantize(np.ones((2, 2, 2)), "weight-block")
    with pytest.raises(ValueError):
        quantize(np.array([[np.inf]]))
    with pytest.raises(ValueError):
        quantize(np.ones((2, 2)), "per-channel")


def test_matmul_sim():
    rng = np.random.default_rng(3)
    a, b = rng.normal(size=(16, 128)), rng.normal(size=(128, 64))
    rep = fp8_matmul_sim(a, b)
    assert 0 < rep.rel_frobenius_error < 0.1
    assert fp8_matmul_sim(a, b, skip=True).rel_frobenius_error == 0.0
    with pytest.raises(ValueError):
        fp8_matmul_sim(a, a)


def test_checkpoint_skips_first_and_last_linears():
    ckpt = init_checkpoint(TinyDefaults(n_layers=4, n_attn=1, d_model=16, d_ffn=32).build())
    names = linear_layer_names(ckpt)
    q, keep = quantize_checkpoint(ckpt, 2, 3)
    assert set(q) == set(names[2:-3])
    assert set(q) | set(keep) == set(ckpt.tensors) and not set(q) & set(keep)
    q0, _ = quantize_checkpoint(ckpt, 0, 0)
    assert set(q0) == set(names)
