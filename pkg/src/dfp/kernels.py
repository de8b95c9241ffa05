"""Blocked integer convolution/GEMM kernels on an emulated 16-lane FMA.

The compute primitive is a fused multiply-add over int16 pairs, vnni_madd,
whose semantics are exactly this loop (wrapping 32-bit arithmetic):

    for v in range(4):
        for o in range(16):
            vout[o] += vinp2[v][2*o] * mem[2*v] + vinp2[v][2*o+1] * mem[2*v+1]

One instruction therefore accumulates 8 products into each of 16 int32
output lanes.  Convolution weights are packed into the layout

    [C/16][K/16][KH][KW][8][16][2]

where the trailing 2 spans consecutive input channels, so each (kh, kw)
step of a 16-input-channel block feeds two madd instructions per 16 output
channels.  Reductions run in a fixed order, input-channel block major, then
kernel row, column, and 8-channel half.  The running int32 sum is spilled
into an FP32 accumulator (scaled by 2**(E_inp + E_wt)) every `icblk*KH*KW`
products; this chain length is the overflow-management knob.

Two engines produce bit-identical outputs and statistics:

* "instr": a Python loop nest issuing one vnni_madd per emulated
  instruction, counting instructions live.
* "fast": an im2col formulation.  Per-chain integer sums are computed
  exactly (float64 matmul; all partial sums stay far below 2**53) and then
  wrapped to int32.  Because two's-complement addition is associative, the
  wrapped totals equal the instruction sequence's, and spilling in the same
  chain order reproduces the FP32 accumulation bit for bit.

With shadow checking enabled, both engines track the exact 64-bit running
sum at every madd boundary and count one overflow event per (output
element, chain) whose running sum leaves the signed 32-bit range.
"""

from __future__ import annotations

import dataclasses
import math
from fractions import Fraction
from typing import List, Optional, Tuple

import numpy as np

from .arith import INT32_MAX, INT32_MIN, Empirical, OverflowPolicy, Strict, shadow_enabled
from .tensor import DfpTensor

_F32_MIN_EXP = -149
_F32_MAX_EXP = 127

# Instruction-accurate engine above this madd count is impractically slow.
_AUTO_INSTR_LIMIT = 50_000

_SHADOW_ROW_BLOCK = 2048  # rows per shadow cumsum slab, bounds memory


# === geometry and blocking ===


@dataclasses.dataclass(frozen=True)
class ConvSpec:
    """Convolution geometry: C input channels, K output channels, HxW input,
    KHxKW kernel, stride, symmetric zero padding."""

    in_ch: int
    out_ch: int
    h: int
    w: int
    kh: int
    kw: int
    stride: int = 1
    pad: int = 0

    def __post_init__(self):
        for name in ("in_ch", "out_ch", "h", "w", "kh", "kw", "stride"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.pad < 0:
            raise ValueError("pad must be non-negative")
        for dim, kdim in ((self.h, self.kh), (self.w, self.kw)):
            span = dim + 2 * self.pad - kdim
            if span < 0 or span % self.stride != 0:
                raise ValueError(
                    f"output size for dim {dim}, kernel {kdim}, stride {self.stride}, "
                    f"pad {self.pad} is not integral")

    @property
    def oh(self) -> int:
        return (self.h + 2 * self.pad - self.kh) // self.stride + 1

    @property
    def ow(self) -> int:
        return (self.w + 2 * self.pad - self.kw) // self.stride + 1


@dataclasses.dataclass(frozen=True)
class BlockingParams:
    """Kernel blocking: icblk input channels per accumulation chain and
    rb_size output elements per register block.  simd_width and vnni_k are
    structural constants of the emulated instruction (16 int32 lanes, 4
    steps of 2 products)."""

    icblk: int
    rb_size: int = 28
    simd_width: int = 16
    vnni_k: int = 4

    def __post_init__(self):
        if self.icblk < 8 or self.icblk % 8 != 0:
            raise ValueError(f"icblk must be a positive multiple of 8, got {self.icblk}")
        if self.rb_size < 1:
            raise ValueError("rb_size must be >= 1")
        if self.simd_width != 16 or self.vnni_k != 4:
            raise ValueError("simd_width is fixed at 16 and vnni_k at 4")


@dataclasses.dataclass
class KernelStats:
    """Instruction counters for one kernel invocation."""

    fma_count: int = 0
    convert_count: int = 0
    spill_count: int = 0
    overflow_count: int = 0

    def merge(self, other: "KernelStats") -> "KernelStats":
        self.fma_count += other.fma_count
        self.convert_count += other.convert_count
        self.spill_count += other.spill_count
        self.overflow_count += other.overflow_count
        return self

    def measured_ratio(self) -> Fraction:
        """Converts per FMA, the overflow-management instruction overhead."""
        if self.fma_count == 0:
            return Fraction(0)
        return Fraction(self.convert_count, self.fma_count)


def chain_length(spec: ConvSpec, blk: BlockingParams) -> int:
    """Products accumulated into one int32 lane between spills."""
    return blk.icblk * spec.kh * spec.kw


def overhead_ratio(spec: ConvSpec, blk: BlockingParams) -> Fraction:
    """Analytic convert/FMA instruction ratio, RB / ((ICBLK/16)*KH*KW*2*RB).

    Exact whenever icblk divides the padded channel count (uniform chains);
    bench runs cross-check it against measured KernelStats.
    """
    rb = blk.rb_size
    return Fraction(rb * 16, blk.icblk * spec.kh * spec.kw * 2 * rb)


def default_blocking(spec: ConvSpec, policy: Optional[OverflowPolicy] = None,
                     rb_size: int = 28) -> BlockingParams:
    """Pick icblk for the given overflow policy.

    Empirical: the smallest multiple of 16 that divides the padded channel
    count and whose chain icblk*KH*KW reaches the policy's chain_block
    target (default 208); the whole padded channel count if no block
    reaches it.  Divisibility keeps every chain full-length, so the
    measured convert/FMA ratio equals the analytic one exactly.  Strict:
    the largest multiple of 8 whose chain stays within max_chain.
    """
    per = spec.kh * spec.kw
    cpad = _ceil_to(spec.in_ch, 16)
    if isinstance(policy, Strict):
        icblk = (policy.max_chain // per) // 8 * 8
        if icblk < 8:
            raise ValueError(
                f"Strict max_chain {policy.max_chain} cannot fit one 8-product madd "
                f"per {spec.kh}x{spec.kw} tap; see safe_chain_length for sizing")
        icblk = min(icblk, cpad)
    else:
        target = policy.chain_block if isinstance(policy, Empirical) else 208
        icblk = cpad
        for cand in range(16, cpad + 1, 16):
            if cpad % cand == 0 and cand * per >= target:
                icblk = cand
                break
    return BlockingParams(icblk=icblk, rb_size=rb_size)


def _ceil_to(x: int, m: int) -> int:
    return (x + m - 1) // m * m


# === the emulated FMA instruction ===


def vnni_madd(mem: np.ndarray, vinp2: np.ndarray, vout: np.ndarray) -> np.ndarray:
    """One emulated FMA: 8 int16 memory values, 4x32 int16 lanes, 16 int32 lanes.

    vout[o] += sum over v of vinp2[v][2o]*mem[2v] + vinp2[v][2o+1]*mem[2v+1],
    in wrapping 32-bit arithmetic.  vout is updated in place and returned.
    """
    mem = np.asarray(mem)
    vinp2 = np.asarray(vinp2)
    if mem.shape != (8,) or mem.dtype != np.int16:
        raise ValueError("mem must be 8 int16 values")
    if vinp2.shape != (4, 32) or vinp2.dtype != np.int16:
        raise ValueError("vinp2 must be 4x32 int16 lanes")
    if vout.shape != (16,) or vout.dtype != np.int32:
        raise ValueError("vout must be 16 int32 lanes")
    m = mem.astype(np.int32)
    even = vinp2[:, 0::2].astype(np.int32)  # lane weights hit by mem[2v]
    odd = vinp2[:, 1::2].astype(np.int32)
    vout += m[0::2] @ even + m[1::2] @ odd
    return vout


def _madd_contrib64(mem: np.ndarray, vinp2: np.ndarray) -> np.ndarray:
    # Exact 64-bit contribution of one madd, for shadow accounting.
    m = mem.astype(np.int64)
    even = vinp2[:, 0::2].astype(np.int64)
    odd = vinp2[:, 1::2].astype(np.int64)
    return m[0::2] @ even + m[1::2] @ odd


# === weight packing ===


@dataclasses.dataclass(frozen=True)
class PackedWeights:
    """Weights relaid as [C/16][K/16][KH][KW][8][16][2] int16.

    The trailing dimension spans two consecutive input channels, matching
    the pairing consumed by vnni_madd.  Channel counts are zero-padded to
    multiples of 16; out_ch/in_ch record the original sizes.
    """

    data: np.ndarray
    shared_exponent: int
    bit_width: int
    out_ch: int
    in_ch: int


def pack_weights(weights: DfpTensor, spec: ConvSpec) -> PackedWeights:
    """Relayout (K, C, KH, KW) weights for the blocked kernels.

    Element W[k][c][r][s] lands at packed index
    ([c//16], [k//16], r, s, (c%16)//2, k%16, c%2).
    """
    w = weights.elements
    if w.shape != (spec.out_ch, spec.in_ch, spec.kh, spec.kw):
        raise ValueError(
            f"weights shape {w.shape} does not match spec "
            f"({spec.out_ch}, {spec.in_ch}, {spec.kh}, {spec.kw})")
    kpad = _ceil_to(spec.out_ch, 16)
    cpad = _ceil_to(spec.in_ch, 16)
    wp = np.zeros((kpad, cpad, spec.kh, spec.kw), np.int16)
    wp[: spec.out_ch, : spec.in_ch] = w
    arr = wp.reshape(kpad // 16, 16, cpad // 16, 8, 2, spec.kh, spec.kw)
    packed = arr.transpose(2, 0, 5, 6, 3, 1, 4).copy()
    return PackedWeights(packed, weights.shared_exponent, weights.bit_width,
                         spec.out_ch, spec.in_ch)


def unpack_weights(pw: PackedWeights) -> DfpTensor:
    """Inverse relayout; padded channels are dropped."""
    c16, k16, kh, kw = pw.data.shape[:4]
    wp = pw.data.transpose(1, 5, 0, 4, 6, 2, 3).reshape(k16 * 16, c16 * 16, kh, kw)
    return DfpTensor(wp[: pw.out_ch, : pw.in_ch].copy(), pw.shared_exponent, pw.bit_width)


# === shared kernel planning ===


@dataclasses.dataclass
class _Plan:
    spec: ConvSpec
    blk: BlockingParams
    n: int
    m: int                       # output pixels, n * oh * ow
    c16: int
    k16: int
    kpad: int
    madd_seq: List[Tuple[int, int, int, int]]  # (cb, kh, kw, half) fixed order
    chunk_bounds: List[Tuple[int, int]]        # madd index ranges per chain
    scale: np.float32
    shadow: bool


def _make_plan(inp: DfpTensor, pw: PackedWeights, spec: ConvSpec,
               blk: BlockingParams, policy: OverflowPolicy) -> _Plan:
    if inp.elements.ndim != 4:
        raise ValueError(f"input must be NCHW, got shape {inp.shape}")
    n, c, h, w = inp.elements.shape
    if (c, h, w) != (spec.in_ch, spec.h, spec.w):
        raise ValueError(f"input shape {inp.shape} does not match spec")
    c16 = _ceil_to(spec.in_ch, 16) // 16
    k16 = _ceil_to(spec.out_ch, 16) // 16
    if pw.data.shape != (c16, k16, spec.kh, spec.kw, 8, 16, 2):
        raise ValueError(f"packed weights shape {pw.data.shape} does not match spec")
    if inp.bit_width > 16 or pw.bit_width > 16:
        raise ValueError("operands must be 16-bit or narrower")

    chain = chain_length(spec, blk)
    if chain % 8 != 0:
        raise ValueError(f"chain length {chain} must be a multiple of 8 products")
    if isinstance(policy, Strict):
        if chain > policy.max_chain:
            raise ValueError(
                f"chain length {chain} exceeds Strict max_chain {policy.max_chain}; "
                f"size chains with safe_chain_length")
        maxa = int(np.abs(inp.elements.astype(np.int32)).max()) if inp.elements.size else 0
        maxb = int(np.abs(pw.data.astype(np.int32)).max()) if pw.data.size else 0
        if maxa * maxb * chain > INT32_MAX:
            safe = INT32_MAX // (maxa * maxb) if maxa * maxb else INT32_MAX
            raise ValueError(
                f"Strict policy infeasible: chain {chain} of products up to "
                f"{maxa}*{maxb} can overflow int32; safe_chain_length for these "
                f"magnitudes is {safe}")

    es = inp.shared_exponent + pw.shared_exponent
    if not _F32_MIN_EXP <= es <= _F32_MAX_EXP:
        raise ValueError(f"spill scale 2**{es} is outside the FP32 range")

    madd_seq = [(cb, r, s, half)
                for cb in range(c16)
                for r in range(spec.kh)
                for s in range(spec.kw)
                for half in (0, 1)]
    chain_madds = chain // 8
    bounds = [(i, min(i + chain_madds, len(madd_seq)))
              for i in range(0, len(madd_seq), chain_madds)]
    return _Plan(spec, blk, n, n * spec.oh * spec.ow, c16, k16, k16 * 16,
                 madd_seq, bounds, np.float32(np.ldexp(1.0, es)),
                 shadow_enabled(policy))


def _blocked_input(inp: DfpTensor, spec: ConvSpec, c16: int) -> np.ndarray:
    # (N, C16, 16, H + 2p, W + 2p) with channel and spatial zero padding.
    n = inp.elements.shape[0]
    hp, wp = spec.h + 2 * spec.pad, spec.w + 2 * spec.pad
    out = np.zeros((n, c16 * 16, hp, wp), np.int16)
    out[:, : spec.in_ch, spec.pad: spec.pad + spec.h, spec.pad: spec.pad + spec.w] = inp.elements
    return out.reshape(n, c16, 16, hp, wp)


def _im2col(ipad: np.ndarray, spec: ConvSpec) -> np.ndarray:
    # (M, C16*KH*KW*16) int16 patch matrix; column order (cb, kh, kw, cc)
    # matches the fixed madd sequence.
    n, c16 = ipad.shape[0], ipad.shape[1]
    oh, ow, s = spec.oh, spec.ow, spec.stride
    cols = np.empty((n, oh, ow, c16, spec.kh, spec.kw, 16), np.int16)
    for r in range(spec.kh):
        for t in range(spec.kw):
            view = ipad[:, :, :, r: r + s * (oh - 1) + 1: s, t: t + s * (ow - 1) + 1: s]
            cols[:, :, :, :, r, t, :] = view.transpose(0, 3, 4, 1, 2)
    return cols.reshape(n * oh * ow, c16 * spec.kh * spec.kw * 16)


# === engines ===


def _run_instr(plan: _Plan, ipad: np.ndarray, packed: np.ndarray,
               debug_partials: Optional[list]) -> Tuple[np.ndarray, KernelStats]:
    spec, blk = plan.spec, plan.blk
    oh, ow, s = spec.oh, spec.ow, spec.stride
    stats = KernelStats()
    out = np.zeros((plan.m, plan.kpad), np.float32)
    if debug_partials is not None:
        partials = [np.zeros((plan.m, plan.kpad), np.int32) for _ in plan.chunk_bounds]

    coords = [(t // (oh * ow), (t // ow) % oh, t % ow) for t in range(plan.m)]
    for kb in range(plan.k16):
        for t0 in range(0, plan.m, blk.rb_size):
            tile = range(t0, min(t0 + blk.rb_size, plan.m))
            tsz = len(tile)
            vtemp = np.zeros((tsz, 16), np.float32)
            for ci, (m0, m1) in enumerate(plan.chunk_bounds):
                vout = np.zeros((tsz, 16), np.int32)
                if plan.shadow:
                    mirror = np.zeros((tsz, 16), np.int64)
                    flags = np.zeros((tsz, 16), bool)
                for cb, r, t_, half in plan.madd_seq[m0:m1]:
                    vinp2 = packed[cb, kb, r, t_, 4 * half: 4 * half + 4].reshape(4, 32)
                    for j, t in enumerate(tile):
                        n_, oh_, ow_ = coords[t]
                        mem = ipad[n_, cb, 8 * half: 8 * half + 8,
                                   oh_ * s + r, ow_ * s + t_]
                        vnni_madd(np.ascontiguousarray(mem), vinp2, vout[j])
                        stats.fma_count += 1
                        if plan.shadow:
                            mirror[j] += _madd_contrib64(mem, vinp2)
                            np.logical_or(flags[j], (mirror[j] > INT32_MAX)
                                          | (mirror[j] < INT32_MIN), out=flags[j])
                if debug_partials is not None:
                    partials[ci][t0: t0 + tsz, kb * 16: kb * 16 + 16] = vout
                vtemp += vout.astype(np.float32) * plan.scale
                stats.convert_count += tsz
                stats.spill_count += 1
                if plan.shadow:
                    stats.overflow_count += int(flags.sum())
            out[t0: t0 + tsz, kb * 16: kb * 16 + 16] = vtemp
    if debug_partials is not None:
        debug_partials.extend(partials)
    return out, stats


def _run_fast(plan: _Plan, ipad: np.ndarray, packed: np.ndarray,
              debug_partials: Optional[list]) -> Tuple[np.ndarray, KernelStats]:
    spec, blk = plan.spec, plan.blk
    cols = _im2col(ipad, spec)
    # (L, kpad) weight matrix in the same (cb, kh, kw, cc) row order.
    c16 = plan.c16
    wmat = packed.transpose(0, 2, 3, 4, 6, 1, 5).reshape(
        c16 * spec.kh * spec.kw * 16, plan.kpad)

    out = np.zeros((plan.m, plan.kpad), np.float32)
    stats = KernelStats()
    for m0, m1 in plan.chunk_bounds:
        r0, r1 = m0 * 8, m1 * 8
        a = cols[:, r0:r1].astype(np.float64)
        b = wmat[r0:r1].astype(np.float64)
        # Exact integer sums: |partials| <= chain * 2**30 << 2**53.
        exact = a @ b
        wrapped = exact.astype(np.int64).astype(np.int32)
        if debug_partials is not None:
            debug_partials.append(wrapped)
        out += wrapped.astype(np.float32) * plan.scale
        if plan.shadow:
            stats.overflow_count += _shadow_excursions(
                cols[:, r0:r1], wmat[r0:r1], m1 - m0)

    total_madds = len(plan.madd_seq)
    n_chunks = len(plan.chunk_bounds)
    n_tiles = -(-plan.m // blk.rb_size)
    stats.fma_count = plan.m * plan.k16 * total_madds
    stats.convert_count = plan.m * plan.k16 * n_chunks
    stats.spill_count = n_tiles * plan.k16 * n_chunks
    return out, stats


def _shadow_excursions(a_chunk: np.ndarray, b_chunk: np.ndarray, madds: int) -> int:
    # Count (output element, chain) pairs whose exact running sum leaves the
    # int32 range at any madd boundary; identical to the instruction mirror.
    kp = b_chunk.shape[1]
    bm = b_chunk.reshape(madds, 8, kp).astype(np.float64)
    count = 0
    for r0 in range(0, a_chunk.shape[0], _SHADOW_ROW_BLOCK):
        rows = a_chunk[r0: r0 + _SHADOW_ROW_BLOCK]
        am = rows.reshape(rows.shape[0], madds, 8).transpose(1, 0, 2).astype(np.float64)
        steps = am @ bm                      # (madds, rows, kp), exact
        run = np.cumsum(steps, axis=0)
        bad = np.any((run > INT32_MAX) | (run < INT32_MIN), axis=0)
        count += int(bad.sum())
    return count


# === public kernel entry points ===


def conv_fprop(inp: DfpTensor, weights: PackedWeights, spec: ConvSpec,
               blk: Optional[BlockingParams] = None,
               policy: OverflowPolicy = Empirical(),
               engine: str = "auto",
               debug_partials: Optional[list] = None
               ) -> Tuple[np.ndarray, KernelStats]:
    """Forward convolution of a DFP input with packed DFP weights.

    Returns the FP32 output (N, K, OH, OW) plus instruction statistics.
    INT32 partial chains of icblk*KH*KW products are spilled into FP32 with
    scale 2**(E_inp + E_wt).  `debug_partials`, if a list, receives the raw
    int32 chain sums (one (M, Kpad) matrix per chain block, pixel-major) for
    verification against wide-integer oracles.
    """
    if blk is None:
        blk = default_blocking(spec, policy)
    plan = _make_plan(inp, weights, spec, blk, policy)
    if engine == "instructions":
        engine = "instr"
    if engine == "auto":
        est = plan.m * plan.k16 * len(plan.madd_seq)
        engine = "instr" if est <= _AUTO_INSTR_LIMIT else "fast"
    if engine not in ("instr", "fast"):
        raise ValueError(f"unknown engine {engine!r}")

    ipad = _blocked_input(inp, spec, plan.c16)
    run = _run_instr if engine == "instr" else _run_fast
    flat, stats = run(plan, ipad, weights.data, debug_partials)
    out = flat[:, : spec.out_ch].reshape(plan.n, spec.oh, spec.ow, spec.out_ch)
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2)), stats


def gemm_dfp(a: DfpTensor, b: DfpTensor,
             blk: Optional[BlockingParams] = None,
             policy: OverflowPolicy = Empirical(),
             engine: str = "auto",
             debug_partials: Optional[list] = None
             ) -> Tuple[np.ndarray, KernelStats]:
    """C = A (M x KK) times B (KK x N) through the blocked integer kernels.

    A GEMM is a 1x1 convolution over M single-pixel images with KK input
    channels, so the reduction is chunked along KK in icblk-sized chains
    with the same spill discipline as conv_fprop.
    """
    if a.elements.ndim != 2 or b.elements.ndim != 2:
        raise ValueError("gemm operands must be rank-2")
    m, kk = a.elements.shape
    kk2, n = b.elements.shape
    if kk != kk2:
        raise ValueError(f"inner dimensions disagree: {kk} vs {kk2}")
    spec = ConvSpec(in_ch=kk, out_ch=n, h=1, w=1, kh=1, kw=1)
    inp = DfpTensor(a.elements.reshape(m, kk, 1, 1), a.shared_exponent, a.bit_width)
    wt = DfpTensor(np.ascontiguousarray(b.elements.T).reshape(n, kk, 1, 1),
                   b.shared_exponent, b.bit_width)
    pw = pack_weights(wt, spec)
    out, stats = conv_fprop(inp, pw, spec, blk, policy, engine, debug_partials)
    return out.reshape(m, n), stats
