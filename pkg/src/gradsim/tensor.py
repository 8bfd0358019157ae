"""Gradient vectors, chunk plans, wire serialization, and tensor fusion.

Working dtype is float64 throughout.  The precision tag controls the wire
format and the arithmetic regime: ``single`` vectors serialize as 64-bit
floats, ``half-emulated`` vectors hold values that are exactly representable
in binary16 and serialize as 16-bit payloads.
"""
from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field

import numpy as np

from . import backends
from .errors import DecodeError, ShapeError


class Precision(enum.Enum):
    SINGLE = "single"
    HALF = "half-emulated"


_ELEMENT_SIZE = {Precision.SINGLE: 8, Precision.HALF: 2}

# wire header: precision tag byte + u32 element count (little endian)
_HEADER = struct.Struct("<BI")


def element_size(precision: Precision) -> int:
    return _ELEMENT_SIZE[precision]


def round_to_half(values: np.ndarray) -> np.ndarray:
    """Round float64 values to the nearest binary16 value (ties to even).

    The result is float64 again, but every entry is exactly half-representable
    (overflow becomes +-inf).
    """
    f32 = np.asarray(values, dtype=np.float64).astype(np.float32)
    h = backends.f32_bits_to_f16_bits(f32.view(np.uint32).ravel())
    w = backends.f16_bits_to_f32_bits(h)
    return w.view(np.float32).astype(np.float64)


@dataclass
class GradientVector:
    """A flat gradient with a precision tag and optional layer boundaries."""

    values: np.ndarray
    precision: Precision = Precision.SINGLE
    layer_offsets: list[tuple[int, int]] | None = None

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=np.float64)
        if self.values.ndim != 1:
            raise ShapeError(f"gradient vector must be 1-D, got shape {self.values.shape}")

    @property
    def length(self) -> int:
        return int(self.values.size)

    @property
    def nbytes_wire(self) -> int:
        return _HEADER.size + self.length * element_size(self.precision)


def half_vector(values: np.ndarray, layer_offsets=None) -> GradientVector:
    """Build a half-emulated vector, rounding values to binary16 first."""
    return GradientVector(round_to_half(values), Precision.HALF, layer_offsets)


def chunk_partition(length: int, p: int) -> np.ndarray:
    """Boundaries of a balanced partition of ``length`` elements into ``p`` chunks.

    Returns p+1 offsets; chunk i is [boundaries[i], boundaries[i+1]).  Larger
    chunks come first and sizes differ by at most one.  Zero-length chunks
    appear only when length < p.
    """
    if p < 1:
        raise ValueError(f"chunk count must be >= 1, got {p}")
    if length < 0:
        raise ValueError(f"length must be >= 0, got {length}")
    q, r = divmod(length, p)
    i = np.arange(p + 1, dtype=np.int64)
    return i * q + np.minimum(i, r)


def reduce_elementwise(
    a: GradientVector, b: GradientVector, op: str = "sum", count: int | None = None
) -> GradientVector:
    """Elementwise combine of two equal-shape, equal-precision vectors.

    ``sum`` adds; ``average`` adds then divides by ``count`` (the caller
    divides once at the end of a collective, not per pairwise step).  Half
    vectors are re-rounded to binary16 after the arithmetic.
    """
    if a.length != b.length:
        raise ShapeError(f"length mismatch: {a.length} vs {b.length}")
    if a.precision is not b.precision:
        raise ShapeError(f"precision mismatch: {a.precision.value} vs {b.precision.value}")
    out = a.values + b.values
    if op == "average":
        if count is None or count < 1:
            raise ValueError("average requires a positive count")
        out = out / count
    elif op != "sum":
        raise ValueError(f"unknown reduce op {op!r}")
    if a.precision is Precision.HALF:
        out = round_to_half(out)
    return GradientVector(out, a.precision)


def concat_chunks(chunks: list[GradientVector]) -> GradientVector:
    """Concatenate chunks in the given order into one vector."""
    if not chunks:
        raise ValueError("concat_chunks requires at least one chunk")
    precision = chunks[0].precision
    for c in chunks[1:]:
        if c.precision is not precision:
            raise ShapeError(
                f"precision mismatch in concat: {c.precision.value} vs {precision.value}"
            )
    return GradientVector(np.concatenate([c.values for c in chunks]), precision)


def encode_vector(vec: GradientVector) -> bytes:
    """Serialize to the wire format from protocol.md.

    Header is a precision byte plus a u32 element count; the payload is the
    values as little-endian f64, or as binary16 bit patterns for
    half-emulated vectors (whose values must already be half-representable).
    """
    if vec.precision is Precision.SINGLE:
        payload = vec.values.astype("<f8").tobytes()
        tag = 0
    else:
        f32 = vec.values.astype(np.float32)
        bits = backends.f32_bits_to_f16_bits(f32.view(np.uint32).ravel())
        back = backends.f16_bits_to_f32_bits(bits).view(np.float32).astype(np.float64)
        if not np.array_equal(back, vec.values, equal_nan=True):
            raise ShapeError("half-emulated vector holds values that are not binary16")
        payload = bits.astype("<u2").tobytes()
        tag = 1
    return _HEADER.pack(tag, vec.length) + payload


def decode_vector(data: bytes) -> GradientVector:
    """Inverse of encode_vector; raises DecodeError on malformed input."""
    if len(data) < _HEADER.size:
        raise DecodeError(f"vector payload too short: {len(data)} bytes")
    tag, count = _HEADER.unpack_from(data)
    if tag == 0:
        precision = Precision.SINGLE
    elif tag == 1:
        precision = Precision.HALF
    else:
        raise DecodeError(f"unknown precision tag {tag}")
    body = data[_HEADER.size :]
    expected = count * element_size(precision)
    if len(body) != expected:
        raise DecodeError(f"vector payload length {len(body)}, expected {expected}")
    if precision is Precision.SINGLE:
        values = np.frombuffer(body, dtype="<f8").astype(np.float64)
    else:
        bits = np.frombuffer(body, dtype="<u2").astype(np.uint16)
        values = backends.f16_bits_to_f32_bits(bits).view(np.float32).astype(np.float64)
    return GradientVector(values, precision)


@dataclass
class FusedBlock:
    """A flushed fusion buffer: one vector plus per-layer slices."""

    vector: GradientVector
    layer_ids: list[int]

    def scatter(self) -> list[tuple[int, np.ndarray]]:
        """Split back into (layer_id, segment) pairs."""
        out = []
        for lid, (start, length) in zip(self.layer_ids, self.vector.layer_offsets):
            out.append((lid, self.vector.values[start : start + length]))
        return out


@dataclass
class FusionBuffer:
    """Accumulates per-layer segments until min_bytes worth are pending.

    A flush triggers exactly when the accumulated byte size reaches min_bytes
    after a push, or on an explicit end-of-step flush().  min_bytes = 0 makes
    every push flush immediately.  Segments are never reordered or dropped.
    """

    min_bytes: int
    precision: Precision = Precision.SINGLE
    pending: list[tuple[int, np.ndarray]] = field(default_factory=list)

    @property
    def pending_bytes(self) -> int:
        n = sum(seg.size for _, seg in self.pending)
        return n * element_size(self.precision)

    def _drain(self) -> FusedBlock:
        offsets = []
        ids = []
        pos = 0
        parts = []
        for lid, seg in self.pending:
            offsets.append((pos, int(seg.size)))
            ids.append(lid)
            parts.append(seg)
            pos += int(seg.size)
        vec = GradientVector(np.concatenate(parts), self.precision, offsets)
        self.pending = []
        return FusedBlock(vec, ids)

    def flush(self) -> FusedBlock | None:
        """End-of-step flush of whatever is pending."""
        if not self.pending:
            return None
        return self._drain()


def fuse_push(buf: FusionBuffer, layer_id: int, segment: np.ndarray) -> FusedBlock | None:
    """Append a layer segment; return a fused block when the threshold is hit."""
    segment = np.ascontiguousarray(segment, dtype=np.float64)
    if segment.ndim != 1:
        raise ShapeError(f"segment must be 1-D, got shape {segment.shape}")
    buf.pending.append((layer_id, segment))
    if buf.pending_bytes >= buf.min_bytes:
        return buf._drain()
    return None
