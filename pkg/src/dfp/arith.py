"""Primitive arithmetic on DFP tensors and INT32 accumulators.

Multiplying two DFP-16 tensors is exact: the integer products fit in 32
bits and the shared exponents add.  Adding requires aligning the operand
with the smaller exponent by an arithmetic right shift.  Down-conversion
packs a 32-bit accumulator back into a P-bit tensor using a leading-zero
count to pick the shift, and spilling converts a partial accumulator into
an FP32 running sum so that long reductions never overflow 32 bits.

Overflow policy values describe how kernels size their accumulation
chains: Strict chains are provably safe for worst-case magnitudes, while
Empirical chains follow the observed behavior of real data and rely on
shadow instrumentation (a 64-bit mirror of the running sum) to count any
excursion beyond the signed 32-bit range.
"""

from __future__ import annotations

import dataclasses
import os
from typing import Tuple, Union

import numpy as np

from .tensor import INT8_MAX, INT8_MIN, DfpTensor

INT32_MIN = -(1 << 31)
INT32_MAX = (1 << 31) - 1

_F32_MIN_EXP = -149  # smallest exponent with 2**e representable in FP32
_F32_MAX_EXP = 127


# === types ===


@dataclasses.dataclass
class AccumTensor:
    """Signed 32-bit accumulator tensor with a shared exponent.

    For a product accumulator the exponent equals the sum of the two source
    exponents, so it may lie outside the int8 range of DfpTensor.
    overflow_count tallies shadow-detected excursions beyond int32.
    """

    elements: np.ndarray
    shared_exponent: int
    accum_width: int = 32
    overflow_count: int = 0

    def __post_init__(self):
        el = np.asarray(self.elements)
        if el.dtype != np.int32:
            raise TypeError(f"accumulator elements must be int32, got {el.dtype}")
        if self.accum_width != 32:
            raise ValueError("accum_width is fixed at 32")
        self.elements = el

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.elements.shape


@dataclasses.dataclass(frozen=True)
class Strict:
    """Chains capped at a length that cannot overflow for any inputs."""

    max_chain: int
    shadow_check: bool = False


@dataclasses.dataclass(frozen=True)
class Empirical:
    """Long chains sized for typical data; overflow is instrumented, not prevented."""

    chain_block: int = 208
    shadow_check: bool = False


OverflowPolicy = Union[Strict, Empirical]


def shadow_enabled(policy: OverflowPolicy) -> bool:
    """Shadow instrumentation is on via the policy or DFP_SHADOW_CHECK=1."""
    return bool(policy.shadow_check) or os.environ.get("DFP_SHADOW_CHECK") == "1"


# === primitives ===


def dfp_multiply(a: DfpTensor, b: DfpTensor) -> AccumTensor:
    """Elementwise product; exact in 32 bits, exponents add.

    Shapes must match or be broadcast-compatible (a length-1 operand acts
    as a scalar).
    """
    try:
        np.broadcast_shapes(a.elements.shape, b.elements.shape)
    except ValueError:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}") from None
    prod = a.elements.astype(np.int32) * b.elements.astype(np.int32)
    return AccumTensor(prod, a.shared_exponent + b.shared_exponent)


def dfp_add(a: DfpTensor, b: DfpTensor) -> AccumTensor:
    """Sum after aligning the smaller-exponent operand by an arithmetic shift.

    The result exponent is max(E_a, E_b).  Shifting truncates toward -inf,
    losing at most one unit in the last place of the result scale.  An
    exponent difference of 32 or more zeroes the smaller operand entirely
    (it lies below 1 ULP of the result).
    """
    try:
        np.broadcast_shapes(a.elements.shape, b.elements.shape)
    except ValueError:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}") from None
    xa = a.elements.astype(np.int32)
    xb = b.elements.astype(np.int32)
    ea, eb = a.shared_exponent, b.shared_exponent
    if ea == eb:
        return AccumTensor(xa + xb, ea)
    if ea > eb:
        diff = ea - eb
        xb = np.zeros_like(xb) if diff >= 32 else xb >> diff
        return AccumTensor(xa + xb, ea)
    diff = eb - ea
    xa = np.zeros_like(xa) if diff >= 32 else xa >> diff
    return AccumTensor(xa + xb, eb)


def lzc(x) -> int:
    """Leading zero count of a 32-bit unsigned magnitude; lzc(0) = 32."""
    v = int(x)
    if not 0 <= v < (1 << 32):
        raise ValueError(f"lzc input must be a 32-bit magnitude, got {v}")
    return 32 - v.bit_length()


def down_convert(acc: AccumTensor, bit_width: int) -> DfpTensor:
    """Pack a 32-bit accumulator into a P-bit DFP tensor.

    The shift R_s = max(0, (A - LZC(max|i|)) - (P - 1)) drops exactly enough
    low bits that the widest element fits the signed P-bit range, and the
    exponent grows by R_s to compensate.  Negative raw shifts clamp to zero
    (left-shifting would add no information).  The single most negative
    post-shift pattern -2**(P-1) saturates to -(2**(P-1) - 1), keeping the
    value error below 2**(new E_s).
    """
    if not 2 <= bit_width <= 16:
        raise ValueError(f"bit_width must be in [2, 16], got {bit_width}")
    if acc.elements.size == 0:
        raise ValueError("empty accumulator")
    maxabs = int(np.abs(acc.elements.astype(np.int64)).max())
    if maxabs == 0:
        es = min(max(acc.shared_exponent, INT8_MIN), INT8_MAX)
        return DfpTensor(np.zeros(acc.shape, np.int16), es, bit_width)
    r_s = max(0, (acc.accum_width - lzc(maxabs)) - (bit_width - 1))
    shifted = acc.elements >> r_s if r_s else acc.elements.copy()
    lim = (1 << (bit_width - 1)) - 1
    shifted = np.clip(shifted, -lim, lim)
    es = acc.shared_exponent + r_s
    if not INT8_MIN <= es <= INT8_MAX:
        raise OverflowError(
            f"down-converted exponent {es} does not fit the int8 exponent range")
    return DfpTensor(shifted.astype(np.int16), es, bit_width)


def safe_chain_length(bit_width: int, pre_shift: int) -> int:
    """Longest worst-case product chain that cannot overflow a 32-bit sum.

    With magnitudes bounded by m = 2**(P - 1 - pre_shift) - 1, this is
    floor((2**31 - 1) / m**2).  Degenerate formats whose elements are all
    zero (m = 0) can never overflow; the count is capped at 2**31 - 1.
    """
    if not 2 <= bit_width <= 16:
        raise ValueError(f"bit_width must be in [2, 16], got {bit_width}")
    if not 0 <= pre_shift < bit_width:
        raise ValueError(f"pre_shift must be in [0, bit_width), got {pre_shift}")
    m = (1 << (bit_width - 1 - pre_shift)) - 1
    if m == 0:
        return INT32_MAX
    return min(INT32_MAX, INT32_MAX // (m * m))


def spill_to_fp32(acc: AccumTensor, dst: np.ndarray) -> np.ndarray:
    """Add the scaled accumulator into an FP32 running sum and reset it.

    dst += float32(acc.elements) * 2**E_s, elementwise, then acc is zeroed
    for the next partial chain.  Both the INT32 -> FP32 conversion and the
    scaled add round to nearest in FP32, matching a hardware convert + FMA
    sequence.
    """
    if dst.dtype != np.float32:
        raise TypeError(f"spill destination must be float32, got {dst.dtype}")
    if dst.shape != acc.elements.shape:
        raise ValueError(f"shape mismatch: {acc.elements.shape} vs {dst.shape}")
    es = acc.shared_exponent
    if not _F32_MIN_EXP <= es <= _F32_MAX_EXP:
        raise ValueError(f"scale 2**{es} is outside the FP32 range")
    scale = np.float32(np.ldexp(1.0, es))
    dst += acc.elements.astype(np.float32) * scale
    acc.elements[...] = 0
    return dst
