"""Gradient vector container, chunk grids, wire codec, fusion buffer."""
import numpy as np
import pytest

from gradsim.errors import DecodeError, ShapeError
from gradsim.tensor import (
    FusionBuffer,
    GradientVector,
    Precision,
    chunk_partition,
    concat_chunks,
    decode_vector,
    encode_vector,
    fuse_push,
    half_vector,
    reduce_elementwise,
    round_to_half,
)


def vec(values, precision=Precision.SINGLE):
    return GradientVector(np.asarray(values, dtype=np.float64), precision)


class TestGradientVector:
    def test_requires_one_dimensional_input(self):
        with pytest.raises(ShapeError):
            GradientVector(np.zeros((2, 2)), Precision.SINGLE)

    def test_wire_bytes_single(self):
        v = vec(np.zeros(10))
        assert v.nbytes_wire == 5 + 10 * 8

    def test_wire_bytes_half(self):
        v = half_vector(np.zeros(10))
        assert v.nbytes_wire == 5 + 10 * 2

    def test_half_vector_values_are_half_representable(self):
        v = half_vector([0.1, 1.0, 3.14159])
        assert np.array_equal(v.values, round_to_half(v.values))


class TestChunkPartition:
    def test_length_7_over_4_nodes(self):
        assert chunk_partition(7, 4).tolist() == [0, 2, 4, 6, 7]

    def test_even_split(self):
        assert chunk_partition(8, 4).tolist() == [0, 2, 4, 6, 8]

    def test_more_nodes_than_elements_gives_empty_chunks(self):
        bounds = chunk_partition(2, 4)
        sizes = np.diff(bounds)
        assert bounds.tolist() == [0, 1, 2, 2, 2]
        assert sizes.sum() == 2

    def test_zero_length(self):
        assert chunk_partition(0, 3).tolist() == [0, 0, 0, 0]

    def test_rejects_nonpositive_node_count(self):
        with pytest.raises(ValueError):
            chunk_partition(5, 0)

    @pytest.mark.parametrize("n,p", [(1, 1), (100, 7), (13, 13), (5, 9)])
    def test_covers_range_without_gaps(self, n, p):
        bounds = chunk_partition(n, p)
        assert len(bounds) == p + 1
        assert bounds[0] == 0 and bounds[-1] == n
        assert (np.diff(bounds) >= 0).all()
        # sizes differ by at most one
        sizes = np.diff(bounds)
        assert sizes.max() - sizes.min() <= 1


class TestReduce:
    def test_sum(self):
        out = reduce_elementwise(vec([1.0, 2.0]), vec([0.5, -2.0]))
        assert out.values.tolist() == [1.5, 0.0]

    def test_average_divides_once_by_count(self):
        a, b = vec([3.0, 9.0]), vec([1.0, 3.0])
        out = reduce_elementwise(a, b, op="average", count=4)
        assert out.values.tolist() == [1.0, 3.0]

    def test_length_mismatch(self):
        with pytest.raises(ShapeError):
            reduce_elementwise(vec([1.0]), vec([1.0, 2.0]))

    def test_precision_mismatch(self):
        with pytest.raises(ShapeError):
            reduce_elementwise(vec([1.0]), half_vector([1.0]))

    def test_half_result_stays_half_representable(self):
        a = half_vector([1.0, 0.1])
        b = half_vector([2.0 ** -11, 0.1])
        out = reduce_elementwise(a, b)
        assert out.precision is Precision.HALF
        assert np.array_equal(out.values, round_to_half(out.values))


class TestWireCodec:
    def test_single_round_trip(self):
        v = vec([1.5, -2.25, 1e-300])
        out = decode_vector(encode_vector(v))
        assert out.precision is Precision.SINGLE
        assert np.array_equal(out.values, v.values)

    def test_half_round_trip(self):
        v = half_vector([1.0, -0.125, 65504.0])
        blob = encode_vector(v)
        assert len(blob) == v.nbytes_wire
        out = decode_vector(blob)
        assert out.precision is Precision.HALF
        assert np.array_equal(out.values, v.values)

    def test_half_payload_is_two_bytes_per_element(self):
        n = 1000
        half = encode_vector(half_vector(np.zeros(n)))
        single = encode_vector(vec(np.zeros(n)))
        assert len(half) == 5 + 2 * n
        assert len(single) == 5 + 8 * n

    def test_encode_rejects_non_half_values_tagged_half(self):
        bad = GradientVector(np.array([1e-300]), Precision.HALF)
        with pytest.raises(ShapeError):
            encode_vector(bad)

    def test_decode_rejects_truncated_payload(self):
        blob = encode_vector(vec([1.0, 2.0]))
        with pytest.raises(DecodeError):
            decode_vector(blob[:-3])

    def test_decode_rejects_unknown_tag(self):
        blob = encode_vector(vec([1.0]))
        with pytest.raises(DecodeError):
            decode_vector(bytes([0xEE]) + blob[1:])

    def test_decode_rejects_short_header(self):
        with pytest.raises(DecodeError):
            decode_vector(b"\x00\x01")


class TestConcat:
    def test_concat_restores_partition(self):
        v = vec(np.arange(11, dtype=np.float64))
        bounds = chunk_partition(11, 3)
        chunks = [GradientVector(v.values[bounds[i]:bounds[i + 1]], v.precision)
                  for i in range(3)]
        assert np.array_equal(concat_chunks(chunks).values, v.values)

    def test_concat_rejects_mixed_precision(self):
        with pytest.raises(ShapeError):
            concat_chunks([vec([1.0]), half_vector([1.0])])

    def test_concat_rejects_empty_list(self):
        with pytest.raises(ValueError):
            concat_chunks([])


class TestFusion:
    def test_small_pushes_buffer_until_threshold(self):
        buf = FusionBuffer(min_bytes=64, precision=Precision.SINGLE)
        out = fuse_push(buf, 0, np.ones(3))   # 24 payload bytes
        assert out is None
        out = fuse_push(buf, 1, np.ones(3))   # 48
        assert out is None
        out = fuse_push(buf, 2, np.ones(2))   # 64 -> flush
        assert out is not None
        assert out.layer_ids == [0, 1, 2]
        assert out.vector.length == 8

    def test_flush_drains_partial_buffer(self):
        buf = FusionBuffer(min_bytes=1 << 20, precision=Precision.SINGLE)
        fuse_push(buf, 5, np.arange(4, dtype=np.float64))
        block = buf.flush()
        assert block.layer_ids == [5]
        assert block.vector.values.tolist() == [0.0, 1.0, 2.0, 3.0]
        assert buf.pending_bytes == 0

    def test_scatter_restores_layer_segments(self):
        buf = FusionBuffer(min_bytes=1, precision=Precision.SINGLE)
        block = fuse_push(buf, 7, np.array([1.0, 2.0]))
        assert block is not None
        (lid, seg), = block.scatter()
        assert lid == 7 and seg.tolist() == [1.0, 2.0]

    def test_multi_layer_scatter(self):
        buf = FusionBuffer(min_bytes=40, precision=Precision.SINGLE)
        fuse_push(buf, 0, np.array([1.0]))
        block = fuse_push(buf, 1, np.array([2.0, 3.0, 4.0, 5.0]))
        parts = dict(block.scatter())
        assert parts[0].tolist() == [1.0]
        assert parts[1].tolist() == [2.0, 3.0, 4.0, 5.0]


class TestRoundToHalf:
    def test_exact_values_pass_through(self):
        vals = np.array([0.0, 1.0, -2.0, 0.5, 2.0 ** -24, 65504.0])
        assert np.array_equal(round_to_half(vals), vals)

    def test_rounds_to_nearest_even(self):
        # 2049 is exactly between half-representable 2048 and 2050
        assert round_to_half(np.array([2049.0]))[0] == 2048.0
        assert round_to_half(np.array([2051.0]))[0] == 2052.0
