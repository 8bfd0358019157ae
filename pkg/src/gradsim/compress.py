"""Gradient compression: sparsification, dropping, and quantization.

Deep-gradient-compression style top-k sparsification keeps a velocity
accumulator so delayed coordinates still carry momentum when they finally
ship; gradient dropping keeps a plain residual.  Ternary and sign
quantization shrink each value to 2 bits or 1; both are unbiased or
error-compensated so the training signal survives.  The sparse wire format
lives here too, since compressed payloads ride the same collectives as
dense ones.
"""
import struct
from dataclasses import dataclass
from math import ceil

import numpy as np

from .errors import DecodeError

SPARSE_MAGIC = 0xD7
_SPARSE_HEAD = struct.Struct("<BII")  # magic, dense_length, count


# -- sparse payloads ---------------------------------------------------------


@dataclass
class SparseGradient:
    """Selected coordinates of a dense gradient, index-sorted."""

    indices: np.ndarray
    values: np.ndarray
    dense_length: int

    def __post_init__(self):
        self.indices = np.ascontiguousarray(self.indices, dtype=np.int64)
        self.values = np.ascontiguousarray(self.values, dtype=np.float64)
        if self.indices.shape != self.values.shape:
            raise ValueError(
                f"index/value shape mismatch: {self.indices.shape} vs {self.values.shape}")
        if self.indices.size:
            if (np.diff(self.indices) <= 0).any():
                raise ValueError("indices must be strictly increasing")
            if self.indices[0] < 0 or self.indices[-1] >= self.dense_length:
                raise ValueError("index out of range")

    @property
    def count(self) -> int:
        return int(self.indices.size)

    @property
    def encoding_bytes(self) -> int:
        return _SPARSE_HEAD.size + self.count * 12  # u32 index + f64 value

    @property
    def compression_ratio(self) -> float:
        return 8.0 * self.dense_length / self.encoding_bytes

    def densify(self) -> np.ndarray:
        out = np.zeros(self.dense_length)
        out[self.indices] = self.values
        return out


def sparse_encode(sg: SparseGradient) -> bytes:
    head = _SPARSE_HEAD.pack(SPARSE_MAGIC, sg.dense_length, sg.count)
    return (head + sg.indices.astype("<u4").tobytes()
            + sg.values.astype("<f8").tobytes())


def sparse_decode(blob: bytes) -> SparseGradient:
    if len(blob) < _SPARSE_HEAD.size:
        raise DecodeError(f"sparse payload too short: {len(blob)} bytes")
    magic, dense_length, count = _SPARSE_HEAD.unpack_from(blob)
    if magic != SPARSE_MAGIC:
        raise DecodeError(f"bad sparse magic 0x{magic:02X}")
    expected = _SPARSE_HEAD.size + count * 12
    if len(blob) != expected:
        raise DecodeError(f"sparse payload length {len(blob)}, expected {expected}")
    off = _SPARSE_HEAD.size
    indices = np.frombuffer(blob, dtype="<u4", count=count, offset=off).astype(np.int64)
    values = np.frombuffer(blob, dtype="<f8", count=count, offset=off + 4 * count)
    try:
        return SparseGradient(indices, values.astype(np.float64), dense_length)
    except ValueError as e:
        raise DecodeError(str(e)) from None


def sparse_sum(parts, dense_length: int | None = None) -> SparseGradient:
    """Sum sparse gradients over the union of their index sets.

    Coordinates shared by several parts are added in part order, matching
    what a dense sum of the densified parts would compute bit for bit.
    """
    parts = list(parts)
    if not parts:
        raise ValueError("need at least one sparse gradient")
    if dense_length is None:
        dense_length = parts[0].dense_length
    if any(p.dense_length != dense_length for p in parts):
        raise ValueError("dense_length mismatch across parts")
    all_idx = np.concatenate([p.indices for p in parts])
    all_val = np.concatenate([p.values for p in parts])
    union, inverse = np.unique(all_idx, return_inverse=True)
    summed = np.zeros(union.size)
    np.add.at(summed, inverse, all_val)
    return SparseGradient(union, summed, dense_length)


# -- selection ----------------------------------------------------------------


def _keep_count(length: int, sparsity: float) -> int:
    # ceil((1-s)*length) with a nudge so 0.99-style floats do not round up
    k = ceil((1.0 - sparsity) * length - 1e-9)
    return min(max(k, 1), length)


def _topk_mask(segment: np.ndarray, sparsity: float) -> np.ndarray:
    k = _keep_count(segment.size, sparsity)
    order = np.argsort(-np.abs(segment), kind="stable")  # ties keep low index
    mask = np.zeros(segment.size, dtype=bool)
    mask[order[:k]] = True
    return mask


def _as_layers(layers, length):
    if layers is None:
        return [(0, length)]
    return list(layers)


def local_gradient_clip(grad: np.ndarray, threshold: float) -> np.ndarray:
    """Scale the whole gradient down to the norm bound; identity when inside."""
    if threshold <= 0:
        raise ValueError(f"clip threshold must be > 0, got {threshold}")
    g = np.asarray(grad, dtype=np.float64)
    norm = float(np.linalg.norm(g))
    if norm <= threshold:
        return g
    return g * (threshold / norm)


# -- top-k sparsification with velocity accumulation ---------------------------


@dataclass(frozen=True)
class WarmupRamp:
    """Exponential sparsity ramp: s_e = 1 - (1 - start) * q^e, capped at final.

    q is fixed by the endpoints, q = ((1-final)/(1-start))^(1/epochs), so the
    kept fraction shrinks geometrically epoch over epoch.
    """

    start: float
    final: float
    epochs: int

    def __post_init__(self):
        if not (0.0 <= self.start <= self.final < 1.0):
            raise ValueError(
                f"need 0 <= start <= final < 1, got {self.start}, {self.final}")
        if self.epochs < 1:
            raise ValueError(f"ramp needs >= 1 epoch, got {self.epochs}")

    def sparsity_at(self, epoch: int) -> float:
        e = min(max(epoch, 0), self.epochs)
        q = ((1.0 - self.final) / (1.0 - self.start)) ** (1.0 / self.epochs)
        return 1.0 - (1.0 - self.start) * q ** e


class DgcState:
    """Velocity and accumulation buffers for one worker's compressor.

    velocity is the momentum-corrected running update; accumulator collects
    what has not shipped yet.  Both are zeroed at sent positions after each
    step, so a coordinate's pending value never ships twice.
    """

    def __init__(self, size: int, momentum: float = 0.9, sparsity: float = 0.75,
                 clip_threshold: float | None = None,
                 warmup: WarmupRamp | None = None):
        if not 0.0 <= sparsity < 1.0:
            raise ValueError(f"sparsity must be in [0, 1), got {sparsity}")
        if not 0.0 <= momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {momentum}")
        if clip_threshold is not None and clip_threshold <= 0:
            raise ValueError(f"clip threshold must be > 0, got {clip_threshold}")
        self.velocity = np.zeros(size)
        self.accumulator = np.zeros(size)
        self.momentum = momentum
        self.sparsity = sparsity
        self.clip_threshold = clip_threshold
        self.warmup = warmup

    @property
    def size(self) -> int:
        return int(self.velocity.size)

    def sparsity_at(self, epoch: int) -> float:
        if self.warmup is None:
            return self.sparsity
        return self.warmup.sparsity_at(epoch)


def dgc_step(state: DgcState, grad, layers=None, epoch: int = 0) -> SparseGradient:
    """Accumulate one gradient and return the coordinates worth sending.

    Clip, fold into the velocity, add the velocity to the accumulator, then
    per layer keep the top ceil((1-s)*len) accumulator magnitudes (ties by
    index).  Kept positions ship and are cleared from both buffers; the rest
    wait, gathering momentum.
    """
    g = np.asarray(grad, dtype=np.float64)
    if g.shape != state.velocity.shape:
        raise ValueError(f"gradient shape {g.shape} != state shape "
                         f"{state.velocity.shape}")
    if state.clip_threshold is not None:
        g = local_gradient_clip(g, state.clip_threshold)
    state.velocity = state.momentum * state.velocity + g
    state.accumulator = state.accumulator + state.velocity
    s = state.sparsity_at(epoch)
    mask = np.zeros(state.size, dtype=bool)
    for lo, hi in _as_layers(layers, state.size):
        mask[lo:hi] = _topk_mask(state.accumulator[lo:hi], s)
    idx = np.nonzero(mask)[0]
    sent = SparseGradient(idx, state.accumulator[idx].copy(), state.size)
    state.accumulator[mask] = 0.0
    state.velocity[mask] = 0.0
    return sent


# -- magnitude dropping ---------------------------------------------------------


def gradient_drop(grad, residual, drop_percent: float):
    """Ship the top (100 - R)%% of |gradient + residual|; bank the rest.

    Returns (SparseGradient, new residual).  Pass residual=None on the first
    step.  Sent + residual equals gradient + old residual with no arithmetic
    beyond the one addition, which is what makes conservation exact.
    """
    if not 0.0 <= drop_percent < 100.0:
        raise ValueError(f"drop percent must be in [0, 100), got {drop_percent}")
    g = np.asarray(grad, dtype=np.float64)
    a = g.copy() if residual is None else g + np.asarray(residual, dtype=np.float64)
    mask = _topk_mask(a, drop_percent / 100.0)
    idx = np.nonzero(mask)[0]
    sent = SparseGradient(idx, a[idx].copy(), a.size)
    new_residual = np.where(mask, 0.0, a)
    return sent, new_residual


# -- ternary quantization ----------------------------------------------------------


@dataclass
class TernaryGradient:
    """Per-layer stochastic rounding of a gradient to {-1, 0, +1} * scaler."""

    levels: np.ndarray   # int8
    scalers: np.ndarray  # one per layer
    layers: list

    def dequantize(self) -> np.ndarray:
        out = np.zeros(self.levels.size)
        for (lo, hi), s in zip(self.layers, self.scalers):
            out[lo:hi] = self.levels[lo:hi] * s
        return out


def ternary_quantize(grad, clip: float = 2.5, seed: int = 0,
                     layers=None) -> TernaryGradient:
    """Layer-wise ternarize: clip to +-clip*sigma, round to sign with p=|g|/max.

    An entry becomes sign(g) with probability |g|/scaler (scaler is the
    layer's max magnitude after clipping) and 0 otherwise, so the expected
    dequantized value equals the clipped gradient.  Rounding draws come from
    a generator seeded per call; the same seed reproduces the same levels.
    """
    if clip <= 0:
        raise ValueError(f"clip must be > 0, got {clip}")
    g = np.asarray(grad, dtype=np.float64)
    spans = _as_layers(layers, g.size)
    rng = np.random.default_rng((seed, 7793))
    uniforms = rng.random(g.size)
    levels = np.zeros(g.size, dtype=np.int8)
    scalers = np.zeros(len(spans))
    for j, (lo, hi) in enumerate(spans):
        seg = g[lo:hi]
        sigma = float(seg.std())
        if sigma > 0.0:  # a constant layer would clip itself to nothing
            seg = np.clip(seg, -clip * sigma, clip * sigma)
        scaler = float(np.max(np.abs(seg))) if seg.size else 0.0
        scalers[j] = scaler
        if scaler == 0.0:
            continue
        probs = np.abs(seg) / scaler
        levels[lo:hi] = np.sign(seg) * (uniforms[lo:hi] < probs)
    return TernaryGradient(levels, scalers, spans)


# -- sign quantization with error feedback -------------------------------------


@dataclass
class OneBitGradient:
    """Signs plus two magnitudes: the means of the positive and negative sides."""

    signs: np.ndarray   # int8 in {-1, 0, +1}
    pos_scale: float
    neg_scale: float    # stored positive; applied with a minus

    def dequantize(self) -> np.ndarray:
        out = np.zeros(self.signs.size)
        out[self.signs > 0] = self.pos_scale
        out[self.signs < 0] = -self.neg_scale
        return out

    @property
    def wire_bytes(self) -> int:
        return (self.signs.size + 7) // 8 + 8  # packed bits + two f32 scalers

    @property
    def compression_ratio(self) -> float:
        return 4.0 * self.signs.size / self.wire_bytes  # vs single precision


def onebit_quantize(grad, error=None):
    """Quantize gradient + carried error to signs; return (quantized, new error).

    The two scalers are the per-side means of the compensated gradient, so
    dequantization is exact when each side is constant.  new error is what
    the signs failed to express; feed it back on the next call.
    """
    g = np.asarray(grad, dtype=np.float64)
    a = g.copy() if error is None else g + np.asarray(error, dtype=np.float64)
    signs = np.sign(a).astype(np.int8)
    pos = a[signs > 0]
    neg = a[signs < 0]
    q = OneBitGradient(signs,
                       float(pos.mean()) if pos.size else 0.0,
                       float(-neg.mean()) if neg.size else 0.0)
    return q, a - q.dequantize()
