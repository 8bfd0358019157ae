"""Numba implementations of the hot kernels.

Same contracts as ``numpy_backend``; scalar bit twiddling compiled with
``@njit``.  Importing this module requires numba; compilation happens on
first call.
"""
from __future__ import annotations

import numba as nb
import numpy as np

NAME = "numba"


@nb.njit(cache=False)
def _f16_to_f32_scalar(h: nb.uint32) -> nb.uint32:
    sign = (np.uint32(h) & np.uint32(0x8000)) << np.uint32(16)
    exp = (np.uint32(h) >> np.uint32(10)) & np.uint32(0x1F)
    sig = np.uint32(h) & np.uint32(0x3FF)
    if exp == np.uint32(31):
        return sign | np.uint32(0x7F800000) | (sig << np.uint32(13))
    if exp == np.uint32(0):
        if sig == np.uint32(0):
            return sign
        bl = np.uint32(0)
        v = sig
        while v != np.uint32(0):
            v >>= np.uint32(1)
            bl += np.uint32(1)
        rest = sig ^ (np.uint32(1) << (bl - np.uint32(1)))
        f_exp = bl + np.uint32(102)
        return sign | (f_exp << np.uint32(23)) | (rest << (np.uint32(24) - bl))
    return sign | ((exp + np.uint32(112)) << np.uint32(23)) | (sig << np.uint32(13))


@nb.njit(cache=False)
def _f32_to_f16_scalar(f: nb.uint32) -> nb.uint16:
    sign = np.uint16((np.uint32(f) & np.uint32(0x80000000)) >> np.uint32(16))
    exp_bits = np.int64((np.uint32(f) >> np.uint32(23)) & np.uint32(0xFF))
    sig = np.int64(np.uint32(f) & np.uint32(0x7FFFFF))

    if exp_bits == 255:
        if sig == 0:
            return np.uint16(sign | np.uint16(0x7C00))
        payload = sig >> 13
        if payload == 0:
            payload = 1
        return np.uint16(sign | np.uint16(0x7C00) | np.uint16(payload))
    if exp_bits == 0:
        return sign

    sig24 = sig | np.int64(0x800000)
    if exp_bits >= 113:
        rem = sig24 & np.int64(0x1FFF)
        q = sig24 >> 13
        if rem > 0x1000 or (rem == 0x1000 and (q & 1) == 1):
            q += 1
        h_exp = exp_bits - 127 + 15
        if q == 0x800:
            h_exp += 1
            q = 0x400
        if h_exp >= 31:
            return np.uint16(sign | np.uint16(0x7C00))
        return np.uint16(sign | np.uint16((h_exp << 10) + (q - 0x400)))

    shift = 126 - exp_bits
    if shift > 25:
        shift = 25
    mask = (np.int64(1) << shift) - 1
    rem = sig24 & mask
    q = sig24 >> shift
    half = np.int64(1) << (shift - 1)
    if rem > half or (rem == half and (q & 1) == 1):
        q += 1
    return np.uint16(sign | np.uint16(q))


@nb.njit(cache=False)
def f16_bits_to_f32_bits(h: np.ndarray) -> np.ndarray:
    out = np.empty(h.size, dtype=np.uint32)
    for i in range(h.size):
        out[i] = _f16_to_f32_scalar(np.uint32(h[i]))
    return out


@nb.njit(cache=False)
def f32_bits_to_f16_bits(f: np.ndarray) -> np.ndarray:
    out = np.empty(f.size, dtype=np.uint16)
    for i in range(f.size):
        out[i] = _f32_to_f16_scalar(np.uint32(f[i]))
    return out


@nb.njit(cache=False)
def _half_sum_loop(bits: np.ndarray) -> nb.uint16:
    buf_u = np.empty(2, dtype=np.uint32)
    buf_f = buf_u.view(np.float32)
    acc16 = np.uint16(bits[0])
    for i in range(1, bits.size):
        buf_u[0] = _f16_to_f32_scalar(np.uint32(acc16))
        buf_u[1] = _f16_to_f32_scalar(np.uint32(bits[i]))
        buf_f[0] = buf_f[0] + buf_f[1]
        acc16 = _f32_to_f16_scalar(buf_u[0])
    return acc16


def half_sum_bits(bits: np.ndarray) -> int:
    bits = np.ascontiguousarray(bits, dtype=np.uint16)
    if bits.size == 0:
        return 0
    return int(_half_sum_loop(bits))


@nb.njit(cache=False)
def _topk_loop(values: np.ndarray, k: int) -> np.ndarray:
    n = values.size
    mag = np.abs(values)
    part = np.partition(mag, n - k)
    thr = part[n - k]
    greater = 0
    for i in range(n):
        if mag[i] > thr:
            greater += 1
    quota = k - greater
    out = np.empty(k, dtype=np.int64)
    j = 0
    for i in range(n):
        if mag[i] > thr:
            out[j] = i
            j += 1
        elif mag[i] == thr and quota > 0:
            out[j] = i
            j += 1
            quota -= 1
    return out


def topk_magnitude_indices(values: np.ndarray, k: int) -> np.ndarray:
    values = np.ascontiguousarray(values, dtype=np.float64)
    n = values.size
    if k <= 0:
        return np.empty(0, dtype=np.int64)
    if k >= n:
        return np.arange(n, dtype=np.int64)
    return _topk_loop(values, k)
