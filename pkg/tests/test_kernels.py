"""Blocked integer convolution kernels: madd semantics, packing, engines."""

import numpy as np
import numpy.testing as npt
import pytest

from dfp.arith import safe_chain_length
from dfp.kernels import (BlockingParams, ConvSpec, Empirical, Fraction,
                         KernelStats, Strict, chain_length, conv_fprop,
                         default_blocking, gemm_dfp, overhead_ratio,
                         pack_weights, unpack_weights, vnni_madd)
from dfp.tensor import DfpTensor, Nearest, QuantConfig, dequantize, quantize

# === helpers ===


def _rand_dfp(rng, shape, pre_shift=1, scale=1.0):
    x = (rng.standard_normal(shape) * scale).astype(np.float32)
    return quantize(x, QuantConfig(16, Nearest(), pre_shift),
                    tensor_id=int(rng.integers(1 << 30)))


def _conv_int64(inp, wt, spec):
    # exact integer convolution of the stored elements, accumulated in int64
    n = inp.elements.shape[0]
    oh = (spec.h + 2 * spec.pad - spec.kh) // spec.stride + 1
    ow = (spec.w + 2 * spec.pad - spec.kw) // spec.stride + 1
    xp = np.zeros((n, spec.in_ch, spec.h + 2 * spec.pad, spec.w + 2 * spec.pad),
                  np.int64)
    xp[:, :, spec.pad: spec.pad + spec.h, spec.pad: spec.pad + spec.w] = \
        inp.elements
    w64 = wt.elements.astype(np.int64)
    acc = np.zeros((n, spec.out_ch, oh, ow), np.int64)
    for r in range(spec.kh):
        for s in range(spec.kw):
            xs = xp[:, :, r: r + oh * spec.stride: spec.stride,
                    s: s + ow * spec.stride: spec.stride]
            acc += np.einsum("nchw,kc->nkhw", xs, w64[:, :, r, s])
    return acc


# === vnni_madd ===


def test_vnni_madd_known():
    # vout[o] += sum_v vinp2[v][2o]*mem[2v] + vinp2[v][2o+1]*mem[2v+1]
    mem = np.arange(1, 9, dtype=np.int16)            # 1..8
    vinp2 = np.zeros((4, 32), np.int16)
    vinp2[0, 0] = 10    # lane 0, even of vector 0: 10*mem[0] = 10
    vinp2[0, 1] = 20    # lane 0, odd  of vector 0: 20*mem[1] = 40
    vinp2[3, 30] = 3    # lane 15, even of vector 3: 3*mem[6] = 21
    vinp2[3, 31] = -4   # lane 15, odd  of vector 3: -4*mem[7] = -32
    vout = np.full(16, 100, np.int32)
    res = vnni_madd(mem, vinp2, vout)
    assert res is vout                              # in-place update
    expect = np.full(16, 100, np.int32)
    expect[0] += 50
    expect[15] += 21 - 32
    npt.assert_array_equal(vout, expect)


def test_vnni_madd_matches_direct_loop():
    rng = np.random.default_rng(3001)
    for _ in range(200):
        mem = rng.integers(-32768, 32768, 8).astype(np.int16)
        vinp2 = rng.integers(-32768, 32768, (4, 32)).astype(np.int16)
        vout = rng.integers(-(1 << 31), 1 << 31, 16).astype(np.int32)
        expect = vout.astype(np.int64).copy()
        for o in range(16):
            for v in range(4):
                expect[o] += (int(vinp2[v, 2 * o]) * int(mem[2 * v])
                              + int(vinp2[v, 2 * o + 1]) * int(mem[2 * v + 1]))
        expect = (expect & 0xFFFFFFFF).astype(np.uint32).view(np.int32)
        got = vnni_madd(mem, vinp2, vout.copy())
        npt.assert_array_equal(got, expect)


def test_vnni_madd_wraps_int32():
    mem = np.zeros(8, np.int16)
    mem[0] = 2
    vinp2 = np.zeros((4, 32), np.int16)
    vinp2[0, 0] = 16384                             # +32768 per call
    vout = np.full(16, 0, np.int32)
    vout[0] = (1 << 31) - 1
    vnni_madd(mem, vinp2, vout)
    assert vout[0] == -(1 << 31) + 32767            # wrapped, no exception


def test_vnni_madd_validation():
    ok_m = np.zeros(8, np.int16)
    ok_v = np.zeros((4, 32), np.int16)
    ok_o = np.zeros(16, np.int32)
    with pytest.raises(ValueError):
        vnni_madd(np.zeros(4, np.int16), ok_v, ok_o)
    with pytest.raises(ValueError):
        vnni_madd(ok_m, np.zeros((4, 16), np.int16), ok_o)
    with pytest.raises(ValueError):
        vnni_madd(ok_m, ok_v, np.zeros(16, np.int64))


# === weight packing ===


def test_pack_weights_index_map():
    # W[k][c][r][s] -> data[c//16][k//16][r][s][(c%16)//2][k%16][c%2]
    rng = np.random.default_rng(3002)
    spec = ConvSpec(32, 48, 8, 8, 3, 3, 1, 1)
    w = rng.integers(-1000, 1000, (48, 32, 3, 3)).astype(np.int16)
    pw = pack_weights(DfpTensor(w, -9, 16), spec)
    assert pw.data.shape == (2, 3, 3, 3, 8, 16, 2)
    for k, c, r, s in [(0, 0, 0, 0), (17, 5, 2, 1), (47, 31, 1, 2), (16, 16, 0, 2)]:
        assert pw.data[c // 16, k // 16, r, s, (c % 16) // 2, k % 16, c % 2] \
            == w[k, c, r, s]


def test_pack_weights_pads_with_zeros():
    spec = ConvSpec(8, 20, 4, 4, 1, 1, 1, 0)
    w = np.arange(1, 20 * 8 + 1, dtype=np.int16).reshape(20, 8, 1, 1)
    pw = pack_weights(DfpTensor(w, -3, 16), spec)
    assert pw.data.shape == (1, 2, 1, 1, 8, 16, 2)
    assert not pw.data[0, :, :, :, 4:, :, :].any()      # channels 8..15
    assert not pw.data[0, 1, :, :, :, 4:, :].any()      # out 20..31


def test_pack_unpack_roundtrip():
    rng = np.random.default_rng(3003)
    for k, c, kh in [(16, 16, 3), (24, 8, 5), (10, 40, 1)]:
        spec = ConvSpec(c, k, 8, 8, kh, kh, 1, 0)
        w = rng.integers(-30000, 30000, (k, c, kh, kh)).astype(np.int16)
        t = DfpTensor(w, -11, 16)
        back = unpack_weights(pack_weights(t, spec))
        npt.assert_array_equal(back.elements, w)
        assert back.shared_exponent == -11


def test_pack_weights_shape_mismatch():
    spec = ConvSpec(16, 16, 4, 4, 3, 3, 1, 1)
    bad = DfpTensor(np.zeros((16, 16, 1, 1), np.int16), 0, 16)
    with pytest.raises(ValueError):
        pack_weights(bad, spec)


# === chain lengths and analytic overheads ===


def test_chain_length_known():
    assert chain_length(ConvSpec(16, 16, 6, 6, 3, 3, 1, 1),
                        BlockingParams(16, 28)) == 144
    assert chain_length(ConvSpec(64, 32, 8, 8, 3, 3, 1, 1),
                        BlockingParams(32, 28)) == 288
    assert chain_length(ConvSpec(256, 16, 4, 4, 1, 1, 1, 0),
                        BlockingParams(256, 28)) == 256


def test_overhead_ratio_known():
    assert overhead_ratio(ConvSpec(64, 64, 8, 8, 3, 3, 1, 1),
                          BlockingParams(64, 4)) == Fraction(1, 72)
    assert overhead_ratio(ConvSpec(16, 16, 8, 8, 1, 1, 1, 0),
                          BlockingParams(16, 1)) == Fraction(1, 2)
    r = overhead_ratio(ConvSpec(256, 256, 8, 8, 3, 3, 1, 1),
                       BlockingParams(256, 28))
    assert r == Fraction(1, 288)
    assert r < Fraction(1, 100)


def test_overhead_ratio_independent_of_rb():
    spec = ConvSpec(64, 64, 8, 8, 3, 3, 1, 1)
    assert overhead_ratio(spec, BlockingParams(64, 1)) \
        == overhead_ratio(spec, BlockingParams(64, 97))


# === default blocking ===


def test_default_blocking_divides_and_hits_target():
    # smallest multiple of 16 dividing padded C with chain >= 208
    cases = [
        (ConvSpec(256, 16, 4, 4, 1, 1, 1, 0), 256),
        (ConvSpec(64, 64, 8, 8, 3, 3, 1, 1), 32),
        (ConvSpec(512, 64, 8, 8, 3, 3, 1, 1), 32),
        (ConvSpec(48, 16, 8, 8, 3, 3, 1, 1), 48),
        (ConvSpec(208, 16, 4, 4, 1, 1, 1, 0), 208),
        (ConvSpec(16, 16, 6, 6, 3, 3, 1, 1), 16),
    ]
    for spec, want in cases:
        blk = default_blocking(spec)
        assert blk.icblk == want, spec
        assert (16 * ((spec.in_ch + 15) // 16)) % blk.icblk == 0


def test_default_blocking_strict():
    blk = default_blocking(ConvSpec(64, 16, 4, 4, 1, 1, 1, 0),
                           Strict(max_chain=8))
    assert blk.icblk == 8
    assert chain_length(ConvSpec(64, 16, 4, 4, 1, 1, 1, 0), blk) <= 8
    blk = default_blocking(ConvSpec(64, 16, 8, 8, 3, 3, 1, 1),
                           Strict(max_chain=72))
    assert blk.icblk == 8


def test_default_blocking_strict_infeasible():
    with pytest.raises(ValueError, match="safe_chain_length"):
        default_blocking(ConvSpec(64, 16, 8, 8, 3, 3, 1, 1),
                         Strict(max_chain=8))


# === engine agreement ===

SHAPES = [
    # (N, C, K, H, W, KH, KW, stride, pad)
    (2, 8, 24, 5, 7, 3, 3, 1, 1),
    (1, 24, 16, 9, 9, 5, 5, 2, 2),
    (3, 16, 16, 6, 6, 1, 1, 1, 0),
    (2, 24, 24, 7, 7, 3, 3, 2, 0),
]


@pytest.mark.parametrize("shape", SHAPES)
def test_engines_bit_identical(shape):
    n, c, k, h, w, kh, kw, st, pad = shape
    rng = np.random.default_rng(3100 + c + k)
    spec = ConvSpec(c, k, h, w, kh, kw, st, pad)
    inp = _rand_dfp(rng, (n, c, h, w))
    wt = _rand_dfp(rng, (k, c, kh, kw), scale=0.2)
    pw = pack_weights(wt, spec)
    pol = Empirical(shadow_check=True)
    out_i, st_i = conv_fprop(inp, pw, spec, policy=pol, engine="instr")
    out_f, st_f = conv_fprop(inp, pw, spec, policy=pol, engine="fast")
    npt.assert_array_equal(out_i, out_f)
    assert st_i == st_f


def test_engines_agree_on_overflow_counts():
    # full-scale constants force every chain out of int32 range
    spec = ConvSpec(32, 16, 4, 4, 1, 1, 1, 0)
    inp = DfpTensor(np.full((1, 32, 4, 4), 32767, np.int16), -15, 16)
    wt = DfpTensor(np.full((16, 32, 1, 1), 32767, np.int16), -15, 16)
    pw = pack_weights(wt, spec)
    pol = Empirical(shadow_check=True)
    out_i, st_i = conv_fprop(inp, pw, spec, policy=pol, engine="instr")
    out_f, st_f = conv_fprop(inp, pw, spec, policy=pol, engine="fast")
    assert st_i.overflow_count == 16 * 16       # every (element, chain) pair
    assert st_i.overflow_count == st_f.overflow_count
    npt.assert_array_equal(out_i, out_f)        # wrapped identically
    # without the shadow pass nothing is counted
    _, st_off = conv_fprop(inp, pw, spec, policy=Empirical(), engine="instr")
    assert st_off.overflow_count == 0


def test_strict_policy_safe_on_adversarial_data():
    # chains capped at safe_chain_length(16, 1) = 8 products cannot overflow
    m = (1 << 14) - 1
    spec = ConvSpec(8, 16, 4, 4, 1, 1, 1, 0)
    inp = DfpTensor(np.full((1, 8, 4, 4), m, np.int16), -14, 16)
    wt = DfpTensor(np.full((16, 8, 1, 1), m, np.int16), -14, 16)
    pol = Strict(max_chain=safe_chain_length(16, 1), shadow_check=True)
    blk = default_blocking(spec, pol)
    out, st = conv_fprop(inp, pack_weights(wt, spec), spec, blk, pol, "instr")
    assert st.overflow_count == 0
    npt.assert_allclose(out, 8 * m * m * 2.0 ** -28, rtol=1e-6)


def test_rb_size_invariance():
    rng = np.random.default_rng(3200)
    spec = ConvSpec(24, 16, 9, 9, 3, 3, 1, 1)
    inp = _rand_dfp(rng, (2, 24, 9, 9))
    pw = pack_weights(_rand_dfp(rng, (16, 24, 3, 3), scale=0.3), spec)
    outs = []
    for rb in (7, 28, 97):
        blk = default_blocking(spec, rb_size=rb)
        out, _ = conv_fprop(inp, pw, spec, blk)
        outs.append(out)
    npt.assert_array_equal(outs[0], outs[1])
    npt.assert_array_equal(outs[1], outs[2])


def test_engine_auto_and_alias():
    rng = np.random.default_rng(3300)
    spec = ConvSpec(16, 16, 5, 5, 3, 3, 1, 1)
    inp = _rand_dfp(rng, (1, 16, 5, 5))
    pw = pack_weights(_rand_dfp(rng, (16, 16, 3, 3), scale=0.2), spec)
    ref, _ = conv_fprop(inp, pw, spec, engine="fast")
    for name in ("auto", "instr", "instructions"):
        out, _ = conv_fprop(inp, pw, spec, engine=name)
        npt.assert_array_equal(out, ref)
    with pytest.raises(ValueError):
        conv_fprop(inp, pw, spec, engine="bogus")


# === numerical exactness ===


def test_conv_matches_int64_oracle_single_chunk():
    # pre_shift 4 keeps |i| < 2^11, so a 144-product chain stays in int32
    # and the kernel result is exactly one float32 spill of the int sum
    rng = np.random.default_rng(3400)
    spec = ConvSpec(16, 16, 6, 6, 3, 3, 1, 1)
    inp = _rand_dfp(rng, (2, 16, 6, 6), pre_shift=4)
    wt = _rand_dfp(rng, (16, 16, 3, 3), pre_shift=4, scale=0.5)
    out, stats = conv_fprop(inp, pack_weights(wt, spec), spec)
    acc = _conv_int64(inp, wt, spec)
    assert np.abs(acc).max() < 1 << 31
    scale = np.float32(2.0 ** (inp.shared_exponent + wt.shared_exponent))
    expect = (acc.astype(np.float32) * scale).astype(np.float32)
    npt.assert_array_equal(out, expect)
    assert stats.fma_count == 2 * 36 * 18       # M * madds per output


def test_debug_partials_match_int64_mod_2_32():
    rng = np.random.default_rng(3500)
    spec = ConvSpec(32, 16, 5, 5, 3, 3, 1, 1)
    blk = BlockingParams(icblk=16, rb_size=28)      # two chunks
    inp = _rand_dfp(rng, (1, 32, 5, 5))
    wt = _rand_dfp(rng, (16, 32, 3, 3), scale=0.2)
    for engine in ("instr", "fast"):
        dbg = []
        conv_fprop(inp, pack_weights(wt, spec), spec, blk, engine=engine,
                   debug_partials=dbg)
        assert len(dbg) == 2 and dbg[0].shape == (25, 16)
        for ci, part in enumerate(dbg):
            lo, hi = ci * 16, ci * 16 + 16
            sub_in = DfpTensor(inp.elements[:, lo:hi], inp.shared_exponent, 16)
            sub_wt = DfpTensor(wt.elements[:, lo:hi], wt.shared_exponent, 16)
            sspec = ConvSpec(16, 16, 5, 5, 3, 3, 1, 1)
            exact = _conv_int64(sub_in, sub_wt, sspec)
            wrapped = (exact & 0xFFFFFFFF).astype(np.uint32).view(np.int32)
            npt.assert_array_equal(part.reshape(25, 16),
                                   wrapped[0].transpose(1, 2, 0).reshape(25, 16))


def test_conv_impulse_identity():
    rng = np.random.default_rng(3600)
    spec = ConvSpec(16, 16, 6, 6, 3, 3, 1, 1)
    inp = _rand_dfp(rng, (2, 16, 6, 6))
    w = np.zeros((16, 16, 3, 3), np.int16)
    for k in range(16):
        w[k, k, 1, 1] = 1024                    # 1024 * 2^-10 = 1.0
    out, _ = conv_fprop(inp, pack_weights(DfpTensor(w, -10, 16), spec), spec)
    npt.assert_array_equal(out, dequantize(inp))


# === gemm ===


def test_gemm_known():
    a = DfpTensor(np.array([[1, 2], [3, 4]], np.int16), -2, 16)
    b = DfpTensor(np.array([[5, 6], [7, 8]], np.int16), -3, 16)
    out, stats = gemm_dfp(a, b)
    npt.assert_array_equal(out, np.array([[0.59375, 0.6875],
                                          [1.34375, 1.5625]], np.float32))
    assert stats == KernelStats(fma_count=4, convert_count=2,
                                spill_count=1, overflow_count=0)


def test_gemm_identity():
    rng = np.random.default_rng(3700)
    a = _rand_dfp(rng, (5, 16))
    eye = DfpTensor(np.eye(16, dtype=np.int16), 0, 16)
    out, _ = gemm_dfp(a, eye)
    npt.assert_array_equal(out, dequantize(a))


def test_gemm_matches_int64_oracle():
    rng = np.random.default_rng(3800)
    a = _rand_dfp(rng, (7, 24), pre_shift=4)
    b = _rand_dfp(rng, (24, 13), pre_shift=4)
    out, _ = gemm_dfp(a, b)
    acc = a.elements.astype(np.int64) @ b.elements.astype(np.int64)
    assert np.abs(acc).max() < 1 << 31
    scale = np.float32(2.0 ** (a.shared_exponent + b.shared_exponent))
    npt.assert_array_equal(out, (acc.astype(np.float32) * scale))


def test_gemm_shape_mismatch():
    a = DfpTensor(np.zeros((2, 3), np.int16), 0, 16)
    b = DfpTensor(np.zeros((4, 2), np.int16), 0, 16)
    with pytest.raises(ValueError):
        gemm_dfp(a, b)


# === stats bookkeeping ===


def test_stats_analytic_consistency():
    # with the default divisor blocking, measured convert/fma ratio equals
    # the analytic overhead exactly
    rng = np.random.default_rng(3900)
    for c, k, kh in [(16, 16, 3), (64, 32, 3), (48, 16, 1), (256, 16, 1)]:
        spec = ConvSpec(c, k, 6, 6, kh, kh, 1, kh // 2)
        blk = default_blocking(spec)
        inp = _rand_dfp(rng, (1, c, 6, 6))
        wt = _rand_dfp(rng, (k, c, kh, kh), scale=0.2)
        _, stats = conv_fprop(inp, pack_weights(wt, spec), spec, blk)
        assert Fraction(stats.convert_count, stats.fma_count) \
            == overhead_ratio(spec, blk)
