"""Pure-numpy implementations of the hot kernels.

Vectorized bit manipulation for the software binary16 codec plus the
deterministic top-k selector used by the sparsifiers.  Semantics must match
``numba_backend`` bit for bit; the cross-backend tests enforce that.
"""
from __future__ import annotations

import numpy as np

NAME = "numpy"

# f32 layout constants
_F32_SIGN = np.uint32(0x80000000)
_F32_EXP = np.uint32(0x7F800000)
_F32_SIG = np.uint32(0x007FFFFF)


def _build_subnormal_table() -> np.ndarray:
    """f32 bit patterns for the 1024 half subnormals (index = half significand)."""
    table = np.zeros(1024, dtype=np.uint32)
    for sig in range(1, 1024):
        bl = sig.bit_length()
        rest = sig ^ (1 << (bl - 1))
        f_exp = bl + 102  # unbiased bl - 25, rebiased +127
        table[sig] = (f_exp << 23) | (rest << (23 - (bl - 1)))
    return table


_SUBNORMAL_TABLE = _build_subnormal_table()


def f16_bits_to_f32_bits(h: np.ndarray) -> np.ndarray:
    """Exact widening of binary16 bit patterns to binary32 bit patterns."""
    h = np.ascontiguousarray(h, dtype=np.uint16)
    h32 = h.astype(np.uint32)
    sign = (h32 & np.uint32(0x8000)) << np.uint32(16)
    exp = (h32 >> np.uint32(10)) & np.uint32(0x1F)
    sig = h32 & np.uint32(0x3FF)

    normal = (sign | ((exp + np.uint32(112)) << np.uint32(23)) | (sig << np.uint32(13)))
    subnormal = sign | _SUBNORMAL_TABLE[sig]
    special = sign | np.uint32(0x7F800000) | (sig << np.uint32(13))

    out = np.where(exp == 0, subnormal, normal)
    out = np.where(exp == 31, special, out)
    return out.astype(np.uint32)


def f32_bits_to_f16_bits(f: np.ndarray) -> np.ndarray:
    """Round binary32 bit patterns to binary16 with round-to-nearest-even."""
    f = np.ascontiguousarray(f, dtype=np.uint32)
    sign = ((f & _F32_SIGN) >> np.uint32(16)).astype(np.uint32)
    exp_bits = ((f & _F32_EXP) >> np.uint32(23)).astype(np.int64)
    sig = (f & _F32_SIG).astype(np.int64)
    sig24 = sig | np.int64(0x800000)

    # normal target path (unbiased exponent >= -14)
    rem_n = sig24 & np.int64(0x1FFF)
    q_n = sig24 >> np.int64(13)
    round_up_n = (rem_n > 0x1000) | ((rem_n == 0x1000) & ((q_n & 1) == 1))
    q_n = q_n + round_up_n
    h_exp = exp_bits - 127 + 15
    carry = q_n == 0x800
    h_exp = h_exp + carry
    q_n = np.where(carry, np.int64(0x400), q_n)
    normal = (h_exp << 10) + (q_n - 0x400)
    normal = np.where(h_exp >= 31, np.int64(0x7C00), normal)

    # subnormal target path (unbiased exponent <= -15)
    shift = np.minimum(126 - exp_bits, np.int64(25))
    shift = np.maximum(shift, np.int64(0))  # irrelevant lanes, keep shifts valid
    mask = (np.int64(1) << shift) - 1
    rem_s = sig24 & mask
    q_s = sig24 >> shift
    half = np.int64(1) << np.maximum(shift - 1, np.int64(0))
    round_up_s = (rem_s > half) | ((rem_s == half) & ((q_s & 1) == 1))
    subnormal = q_s + round_up_s

    out = np.where(exp_bits >= 113, normal, subnormal)
    out = np.where(exp_bits == 0, np.int64(0), out)

    # inf / nan
    payload = sig >> 13
    payload = np.where((sig != 0) & (payload == 0), np.int64(1), payload)
    special = np.int64(0x7C00) | payload
    out = np.where(exp_bits == 255, special, out)

    return (sign | out.astype(np.uint32)).astype(np.uint16)


def half_sum_bits(bits: np.ndarray) -> int:
    """Sum binary16 values with a binary16 accumulator (round after every add)."""
    bits = np.ascontiguousarray(bits, dtype=np.uint16)
    if bits.size == 0:
        return 0
    acc = bits[:1].copy()
    for i in range(1, bits.size):
        a = f16_bits_to_f32_bits(acc).view(np.float32)
        b = f16_bits_to_f32_bits(bits[i : i + 1]).view(np.float32)
        s = (a + b).view(np.uint32)
        acc = f32_bits_to_f16_bits(s)
    return int(acc[0])


def topk_magnitude_indices(values: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest |values|, ties broken by lower index, sorted."""
    values = np.ascontiguousarray(values, dtype=np.float64)
    n = values.size
    if k <= 0:
        return np.empty(0, dtype=np.int64)
    if k >= n:
        return np.arange(n, dtype=np.int64)
    mag = np.abs(values)
    order = np.argsort(-mag, kind="stable")
    return np.sort(order[:k]).astype(np.int64)
