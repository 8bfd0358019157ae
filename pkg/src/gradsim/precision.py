"""Emulated mixed-precision arithmetic.

Half precision (1 sign, 5 exponent, 10 mantissa bits) is emulated in
software so results are bit-identical everywhere; the 16-bit patterns live
in uint16 arrays.  Rounding is nearest-even throughout.  Master weights stay
in single precision; half copies are regenerated from the master after every
update.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import backends

HALF_MAX = 65504.0          # (2 - 2**-10) * 2**15
HALF_MIN_NORMAL = 2.0 ** -14
HALF_MIN_SUBNORMAL = 2.0 ** -24
HALF_EPS = 2.0 ** -10       # spacing at 1.0

_EXP_MASK = 0x7C00
_SIGN_MASK = 0x8000


class ConvertFlags(NamedTuple):
    overflow: bool   # finite input rounded to +-infinity
    underflow: bool  # nonzero input rounded to signed zero


@dataclass(frozen=True)
class HalfValue:
    bits: int

    def __post_init__(self):
        if not 0 <= self.bits <= 0xFFFF:
            raise ValueError("half bits out of 16-bit range")

    @classmethod
    def from_float(cls, x: float) -> "HalfValue":
        h, _ = to_half(x)
        return h

    def to_float(self) -> float:
        return from_half(self)

    def is_inf(self) -> bool:
        return (self.bits & 0x7FFF) == _EXP_MASK

    def is_nan(self) -> bool:
        return (self.bits & _EXP_MASK) == _EXP_MASK and (self.bits & 0x03FF) != 0


def to_half_array(values: np.ndarray) -> tuple[np.ndarray, ConvertFlags]:
    """Round values to half bit patterns; aggregate overflow/underflow flags."""
    v = np.asarray(values, dtype=np.float64)
    f32 = v.astype(np.float32)
    bits = backends.f32_bits_to_f16_bits(f32.view(np.uint32).ravel()).reshape(v.shape)
    exp = bits & _EXP_MASK
    frac = bits & 0x03FF
    became_inf = (exp == _EXP_MASK) & (frac == 0) & np.isfinite(v)
    became_zero = ((bits & 0x7FFF) == 0) & (v != 0.0) & np.isfinite(v)
    return bits, ConvertFlags(bool(became_inf.any()), bool(became_zero.any()))


def from_half_array(bits: np.ndarray) -> np.ndarray:
    """Exact widening of half bit patterns to f64."""
    b = np.ascontiguousarray(bits, dtype=np.uint16)
    f32 = backends.f16_bits_to_f32_bits(b.ravel()).view(np.float32).reshape(b.shape)
    return f32.astype(np.float64)


def to_half(x: float) -> tuple[HalfValue, ConvertFlags]:
    bits, flags = to_half_array(np.array([x], dtype=np.float64))
    return HalfValue(int(bits[0])), flags


def from_half(h: HalfValue) -> float:
    return float(from_half_array(np.array([h.bits], dtype=np.uint16))[0])


def half_add(a: HalfValue, b: HalfValue) -> HalfValue:
    """Widen, add in single precision, round back to nearest-even half."""
    s = np.float32(from_half(a)) + np.float32(from_half(b))
    return HalfValue.from_float(float(s))


# -- loss scaling -----------------------------------------------------------


@dataclass
class LossScaleState:
    """Loss-scale factor plus the skip counter.

    policy "constant" keeps scale fixed; "dynamic" halves it (times backoff)
    on an overflowed batch and multiplies by growth after `window`
    consecutive clean batches.  A fresh overflow restarts the clean streak,
    so the scale never grows inside the backoff window.
    """

    scale: float = 1.0
    policy: str = "constant"
    growth: float = 2.0
    backoff: float = 0.5
    window: int = 2000
    skipped_batches: int = 0
    clean_streak: int = 0

    def __post_init__(self):
        if self.scale <= 0:
            raise ValueError("loss scale must be > 0")
        if self.policy not in ("constant", "dynamic"):
            raise ValueError(f"unknown loss-scale policy {self.policy!r}")
        if self.policy == "dynamic":
            if not (0 < self.backoff < 1 and self.growth > 1 and self.window >= 1):
                raise ValueError("dynamic policy needs 0<backoff<1, growth>1, window>=1")

    def record_step(self, overflowed: bool) -> None:
        if overflowed:
            self.skipped_batches += 1
            self.clean_streak = 0
            if self.policy == "dynamic":
                self.scale *= self.backoff
            return
        self.clean_streak += 1
        if self.policy == "dynamic" and self.clean_streak >= self.window:
            self.scale *= self.growth
            self.clean_streak = 0


def scale_loss(loss: float, state: LossScaleState) -> float:
    return loss * state.scale


def unscale_gradients(grads: np.ndarray, state: LossScaleState) -> np.ndarray:
    """Divide by the scale factor; must run before clipping or weight decay."""
    return np.asarray(grads, dtype=np.float64) / state.scale


def gradients_overflowed(half_bits: np.ndarray) -> bool:
    """True when any entry is infinity or NaN (exponent field saturated)."""
    b = np.asarray(half_bits, dtype=np.uint16)
    return bool(((b & _EXP_MASK) == _EXP_MASK).any())


def mixed_update(master: np.ndarray, half_grad_bits: np.ndarray, eta: float,
                 state: LossScaleState) -> tuple[np.ndarray, np.ndarray, bool]:
    """One optimizer step against the single-precision master copy.

    Half gradients are widened, unscaled, and applied as w <- w - eta*g in
    single precision; the half weight copy is regenerated from the new
    master.  A gradient carrying an overflow pattern skips the batch: the
    master is untouched and only the skip counter (and, under the dynamic
    policy, the scale) changes.

    Returns (new master, half weight bits, skipped).
    """
    master = np.asarray(master, dtype=np.float32)
    if gradients_overflowed(half_grad_bits):
        state.record_step(overflowed=True)
        bits, _ = to_half_array(master.astype(np.float64))
        return master, bits, True
    g = from_half_array(half_grad_bits) / state.scale
    new_master = (master - np.float32(eta) * g.astype(np.float32)).astype(np.float32)
    state.record_step(overflowed=False)
    bits, _ = to_half_array(new_master.astype(np.float64))
    return new_master, bits, False


# -- reductions -------------------------------------------------------------


def reduce_single_precision(half_bits: np.ndarray) -> float:
    """Sum half inputs in a single-precision accumulator.

    The accumulator never drops below 32 bits; callers round the result back
    to half only at the output boundary if they need a half result.
    """
    b = np.asarray(half_bits, dtype=np.uint16)
    if b.size == 0:
        return 0.0
    f32 = from_half_array(b).astype(np.float32)
    acc = np.float32(0.0)
    for v in f32:
        acc = np.float32(acc + v)
    return float(acc)


def reduce_half_accumulator(half_bits: np.ndarray) -> HalfValue:
    """Same sum but the running total is rounded to half after every add."""
    b = np.ascontiguousarray(half_bits, dtype=np.uint16)
    return HalfValue(int(backends.half_sum_bits(b)))
