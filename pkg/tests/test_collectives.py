"""All-reduce state machines: correctness, step counts, decomposition, audits."""
import os

import numpy as np
import pytest

from gradsim import collectives as C
from gradsim.errors import CollectiveFailedError, ShapeError
from gradsim.simnet import LatencyModel, Simulator, Straggler

GOLDEN = os.path.join(os.path.dirname(__file__), "golden")


def lat(a=0.0, b=0.0):
    return LatencyModel(startup=a, per_byte=b)


def oracle_sum(vecs):
    return np.sum(np.asarray(vecs), axis=0)


class TestRing:
    def test_single_node_runs_zero_messages(self):
        sim = Simulator(lat())
        out = C.ring_all_reduce([np.array([3.0, 1.0])], sim=sim)
        assert out[0].tolist() == [3.0, 1.0]
        assert sim.trace == []

    def test_constant_vectors_sum_to_six(self):
        vecs = [np.full(8, float(i)) for i in range(4)]
        chunks = C.ring_scatter_reduce(vecs)
        for c, vals in chunks:
            assert (vals == 6.0).all()
        # each node owns a distinct chunk
        assert sorted(c for c, _ in chunks) == [0, 1, 2, 3]

    def test_scatter_reduce_message_count_is_p_times_p_minus_1(self):
        sim = Simulator(lat())
        sess = C.CollectiveSession(sim, "ring", [np.ones(8)] * 4)
        sess.run()
        sends = sum(v.get(("scatter-reduce", "sent"), 0) for v in sess.activity.values())
        assert sends == 12

    def test_all_gather_spreads_owned_chunks(self):
        vecs = [np.ones(8) for _ in range(4)]
        chunks = C.ring_scatter_reduce(vecs)
        full = C.ring_all_gather(chunks)
        for v in full:
            assert (v == 4.0).all()

    def test_total_steps_2p_minus_2_on_unit_latency(self):
        sim = Simulator(lat(a=1.0))
        C.ring_all_reduce([np.ones(8) * i for i in range(4)], sim=sim)
        assert sim.now == 6.0

    def test_received_gather_chunks_overwrite_not_reduce(self):
        # all-gather over chunks of distinct values must not double anything
        vecs = [np.arange(8, dtype=float) + 10 * i for i in range(4)]
        out = C.ring_all_reduce(vecs)
        expected = oracle_sum(vecs)
        for v in out:
            assert np.array_equal(v, expected)


class TestRhd:
    def test_p2_hand_trace(self):
        out = C.rhd_all_reduce([np.array([1.0, 2.0]), np.array([3.0, 4.0])])
        assert out[0].tolist() == [4.0, 6.0]
        assert out[1].tolist() == [4.0, 6.0]

    def test_p2_takes_two_steps(self):
        sim = Simulator(lat(a=1.0))
        C.rhd_all_reduce([np.array([1.0, 2.0]), np.array([3.0, 4.0])], sim=sim)
        assert sim.now == 2.0

    @pytest.mark.parametrize("p", [2, 4, 8, 16, 32])
    def test_power_of_two_completes_in_2_log2_p(self, p):
        sim = Simulator(lat(a=1.0))
        C.rhd_all_reduce([np.ones(64) for _ in range(p)], sim=sim)
        assert sim.now == 2 * int(np.log2(p))

    def test_p6_core_mapping_and_idle_set(self):
        sim = Simulator(lat())
        sess = C.CollectiveSession(sim, "rhd", [np.arange(10.0)] * 6)
        sess.run()
        core = {n for n, m in sess.machines.items() if m.role in ("core", "combiner")}
        assert core == {0, 2, 4, 5}
        assert sess.idle_nodes(["scatter-reduce", "all-gather"]) == {1, 3}

    def test_p7_idles_r_nodes_during_core(self):
        sim = Simulator(lat())
        sess = C.CollectiveSession(sim, "rhd", [np.arange(10.0)] * 7)
        sess.run()
        assert sess.idle_nodes(["scatter-reduce", "all-gather"]) == {1, 3, 5}

    def test_odd_nodes_still_get_the_result(self):
        vecs = [np.full(5, float(i + 1)) for i in range(6)]
        out = C.rhd_all_reduce(vecs)
        for v in out:
            assert (v == 21.0).all()


class TestBlockDecomposition:
    def test_600_splits_into_four_power_blocks(self):
        d = C.binary_blocks_decompose(600)
        assert list(d.blocks) == [512, 64, 16, 8]

    def test_8_is_a_single_block(self):
        assert list(C.binary_blocks_decompose(8).blocks) == [8]

    def test_7_is_4_2_1(self):
        assert list(C.binary_blocks_decompose(7).blocks) == [4, 2, 1]

    @pytest.mark.parametrize("p", [1, 2, 3, 17, 100, 255, 256, 1000, 1024])
    def test_blocks_partition_p(self, p):
        d = C.binary_blocks_decompose(p)
        assert sum(d.blocks) == p
        assert all(b & (b - 1) == 0 for b in d.blocks)
        assert list(d.blocks) == sorted(d.blocks, reverse=True)
        # assignment covers every node exactly once
        assert sorted(d.assignment) == list(range(p))

    def test_members_are_consecutive_largest_first(self):
        d = C.binary_blocks_decompose(12)
        assert d.members(0) == list(range(8))
        assert d.members(1) == [8, 9, 10, 11]


class TestBinaryBlocks:
    def test_p8_matches_rhd_result_and_step_count(self):
        vecs = [np.arange(16, dtype=float) * (i + 1) for i in range(8)]
        sim_b = Simulator(lat(a=1.0))
        out_b = C.binary_blocks_all_reduce([v.copy() for v in vecs], sim=sim_b)
        sim_r = Simulator(lat(a=1.0))
        out_r = C.rhd_all_reduce([v.copy() for v in vecs], sim=sim_r)
        assert sim_b.now == sim_r.now == 6.0
        for b, r in zip(out_b, out_r):
            assert np.array_equal(b, r)

    def test_p12_all_ones_gives_twelves(self):
        out = C.binary_blocks_all_reduce([np.ones(10) for _ in range(12)])
        for v in out:
            assert (v == 12.0).all()

    def test_p7_oracle_with_no_idle_nodes(self):
        vecs = [np.arange(9, dtype=float) + i for i in range(7)]
        sim = Simulator(lat())
        sess = C.CollectiveSession(sim, "binary-blocks", vecs)
        out = sess.run()
        expected = oracle_sum(vecs)
        for v in out:
            assert np.array_equal(v, expected)
        phases = ["scatter-reduce", "all-gather", "block-up", "block-down"]
        assert sess.idle_nodes(phases) == set()


class TestHierarchical:
    def test_group_size_p_is_plain_gather_broadcast(self):
        vecs = [np.full(4, float(i)) for i in range(5)]
        sim = Simulator(lat(a=1.0))
        out = C.hierarchical_all_reduce(vecs, group_size=5, sim=sim)
        for v in out:
            assert (v == 10.0).all()
        assert sim.now == 2.0  # one gather step, one broadcast step

    def test_p16_group4_oracle(self):
        rng = np.random.default_rng(5)
        vecs = [rng.integers(-9, 9, 12).astype(float) for _ in range(16)]
        out = C.hierarchical_all_reduce(vecs, group_size=4)
        expected = oracle_sum(vecs)
        for v in out:
            assert np.array_equal(v, expected)

    def test_inter_master_ring_is_six_steps_for_four_masters(self):
        sim = Simulator(lat(a=1.0))
        C.hierarchical_all_reduce([np.ones(8)] * 16, group_size=4, sim=sim)
        # 1 gather step + 2*(4-1) ring steps + 1 broadcast step
        assert sim.now == 8.0

    def test_rejects_bad_group_size(self):
        with pytest.raises(ValueError):
            C.hierarchical_all_reduce([np.ones(2)] * 4, group_size=0)


class TestCrossAlgorithmAgreement:
    @pytest.mark.parametrize("p", [1, 3, 6, 9, 16])
    def test_all_algorithms_agree(self, p):
        rng = np.random.default_rng(p)
        vecs = [rng.normal(0, 1, 33) for _ in range(p)]
        results = [
            C.ring_all_reduce([v.copy() for v in vecs])[0],
            C.rhd_all_reduce([v.copy() for v in vecs])[0],
            C.binary_blocks_all_reduce([v.copy() for v in vecs])[0],
            C.hierarchical_all_reduce([v.copy() for v in vecs], group_size=3)[0],
        ]
        for r in results[1:]:
            assert np.allclose(r, results[0], rtol=1e-12, atol=1e-12)


class TestReductionOps:
    def test_average_divides_once_at_the_end(self):
        vecs = [np.full(3, 2.0), np.full(3, 4.0), np.full(3, 6.0), np.full(3, 8.0)]
        out = C.ring_all_reduce(vecs, op="average")
        assert out[0].tolist() == [5.0, 5.0, 5.0]

    def test_unknown_op_rejected(self):
        with pytest.raises(ValueError):
            C.ring_all_reduce([np.ones(2)] * 2, op="median")

    def test_length_mismatch_rejected(self):
        with pytest.raises(ShapeError):
            C.ring_all_reduce([np.ones(2), np.ones(3)])


class TestFailures:
    def test_crash_mid_collective_fails_fast_naming_the_node(self):
        sim = Simulator(lat(a=1.0))
        sess = C.CollectiveSession(sim, "ring", [np.ones(8)] * 4)
        sess.start()
        sim.inject_failure(2, 2.5)
        with pytest.raises(CollectiveFailedError, match="node 2"):
            sess.run(max_time=100.0)

    def test_crash_at_t0_fails_any_collective(self):
        for alg in ("ring", "rhd", "binary-blocks"):
            sim = Simulator(lat(a=1.0))
            sess = C.CollectiveSession(sim, alg, [np.ones(4)] * 4)
            sess.start()
            sim.inject_failure(0, 0.0)
            with pytest.raises(CollectiveFailedError):
                sess.run(max_time=50.0)

    def test_non_participant_crash_changes_nothing(self):
        sim = Simulator(lat(a=1.0))
        sess = C.CollectiveSession(sim, "ring", [np.ones(4)] * 3, node_ids=[0, 1, 2])
        sim.add_node(99, C.NodeHub(99))
        sim.inject_failure(99, 0.5)
        out = sess.run()
        for v in out:
            assert (v == 3.0).all()

    def test_slow_failure_delays_but_does_not_abort(self):
        sim = Simulator(lat(a=1.0))
        sess = C.CollectiveSession(sim, "ring", [np.ones(4)] * 4)
        sess.start()
        sim.inject_failure(1, 0.0, kind="slow", multiplier=5.0)
        out = sess.run(max_time=1000.0)
        assert (out[0] == 4.0).all()
        assert sim.now > 6.0


class TestOutOfOrderDelivery:
    def test_straggler_delays_do_not_corrupt_results(self):
        strag = Straggler(kind="exponential-tail", rate=0.5, tail_prob=0.6)
        for p in (4, 6, 7, 8):
            rng = np.random.default_rng(p)
            vecs = [rng.integers(-4, 5, 11).astype(float) for _ in range(p)]
            sim = Simulator(LatencyModel(startup=0.5, per_byte=0.0,
                                         straggler=strag, seed=p))
            out = C.rhd_all_reduce([v.copy() for v in vecs], sim=sim, max_time=10_000.0)
            expected = oracle_sum(vecs)
            for v in out:
                assert np.array_equal(v, expected), p


class TestGoldenTraces:
    @pytest.mark.parametrize("p", [2, 4, 6, 7])
    def test_rhd_trace_is_byte_stable(self, p):
        sim = Simulator(LatencyModel(startup=1.0, per_byte=0.001))
        vecs = [np.arange(i, i + 8, dtype=np.float64) for i in range(p)]
        C.rhd_all_reduce(vecs, sim=sim)
        got = "\n".join(sim.trace_lines()) + "\n"
        with open(os.path.join(GOLDEN, f"rhd_p{p}.trace")) as f:
            assert got == f.read()


class TestEnvelope:
    def test_round_trip(self):
        from gradsim.tensor import Precision
        blob = C.encode_message(7, C.PHASE_SCATTER, 3, 10, 14,
                                np.array([1.0, -2.0, 3.5, 0.0]), Precision.SINGLE)
        cid, phase, step, start, end, vec = C.decode_message(blob)
        assert (cid, phase, step, start, end) == (7, C.PHASE_SCATTER, 3, 10, 14)
        assert vec.values.tolist() == [1.0, -2.0, 3.5, 0.0]

    def test_bad_magic_rejected(self):
        from gradsim.errors import DecodeError
        from gradsim.tensor import Precision
        blob = C.encode_message(1, 1, 0, 0, 1, np.zeros(1), Precision.SINGLE)
        with pytest.raises(DecodeError):
            C.decode_message(b"\x00" + blob[1:])
