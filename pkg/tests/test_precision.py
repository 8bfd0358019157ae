"""Half emulation, loss scaling, master-copy updates, accumulator width."""
import numpy as np
import pytest

from gradsim import precision as P


class TestConversionScalars:
    def test_one_is_0x3c00(self):
        h, flags = P.to_half(1.0)
        assert h.bits == 0x3C00
        assert flags == (False, False)
        assert P.from_half(h) == 1.0

    def test_below_subnormal_range_underflows_to_signed_zero(self):
        h, flags = P.to_half(2.0 ** -25)
        assert h.bits == 0x0000 and flags.underflow and not flags.overflow
        h, flags = P.to_half(-(2.0 ** -25))
        assert h.bits == 0x8000 and flags.underflow

    def test_70000_overflows_to_infinity(self):
        h, flags = P.to_half(70000.0)
        assert h.is_inf() and flags.overflow and not flags.underflow

    def test_infinite_input_sets_no_flag(self):
        h, flags = P.to_half(float("inf"))
        assert h.is_inf() and flags == (False, False)

    def test_nan_passes_through_without_flags(self):
        h, flags = P.to_half(float("nan"))
        assert h.is_nan() and flags == (False, False)

    def test_half_max_constant(self):
        assert P.HALF_MAX == (2 - 2.0 ** -10) * 2.0 ** 15
        h, flags = P.to_half(P.HALF_MAX)
        assert not flags.overflow and P.from_half(h) == 65504.0


def test_round_trip_every_finite_pattern():
    bits = np.arange(65536, dtype=np.uint16)
    finite = bits[(bits & 0x7C00) != 0x7C00]
    widened = P.from_half_array(finite)
    back, flags = P.to_half_array(widened)
    assert np.array_equal(back, finite)
    assert not flags.overflow
    # exact inputs produce no underflow flag even in the subnormal range
    assert not flags.underflow


def test_normalized_exponent_range_is_minus14_to_15():
    smallest_normal = P.from_half(P.HalfValue(0x0400))
    largest = P.from_half(P.HalfValue(0x7BFF))
    assert smallest_normal == 2.0 ** -14
    assert largest < 2.0 ** 16 and largest >= 2.0 ** 15


class TestLossScaling:
    def test_scale_one_is_identity(self):
        st = P.LossScaleState(scale=1.0)
        g = np.array([1.0, -2.5])
        assert P.scale_loss(3.0, st) == 3.0
        assert np.array_equal(P.unscale_gradients(g, st), g)

    def test_scale_then_unscale_is_exact_for_power_of_two(self):
        st = P.LossScaleState(scale=8.0)
        g = np.array([0.3, -1.7, 2.0 ** -30])
        scaled = g * st.scale
        assert np.array_equal(P.unscale_gradients(scaled, st), g)

    def test_scaling_by_8_rescues_tiny_gradients(self):
        # magnitudes clustered below the half subnormal floor
        rng = np.random.default_rng(0)
        g = rng.uniform(2.0 ** -27, 2.0 ** -23, 1000)
        bits_raw, _ = P.to_half_array(g)
        bits_scaled, _ = P.to_half_array(g * 8.0)
        nonzero_raw = np.count_nonzero(bits_raw & 0x7FFF)
        nonzero_scaled = np.count_nonzero(bits_scaled & 0x7FFF)
        assert nonzero_scaled > nonzero_raw

    def test_rejects_nonpositive_scale(self):
        with pytest.raises(ValueError):
            P.LossScaleState(scale=0.0)

    def test_dynamic_policy_halves_then_waits_full_window(self):
        st = P.LossScaleState(scale=16.0, policy="dynamic",
                              growth=2.0, backoff=0.5, window=4)
        st.record_step(overflowed=True)
        assert st.scale == 8.0 and st.skipped_batches == 1
        for i in range(3):
            st.record_step(overflowed=False)
            assert st.scale == 8.0  # no growth inside the window
        st.record_step(overflowed=False)
        assert st.scale == 16.0

    def test_overflow_restarts_clean_streak(self):
        st = P.LossScaleState(scale=4.0, policy="dynamic", window=3)
        st.record_step(False)
        st.record_step(False)
        st.record_step(True)   # streak resets, scale halves
        assert st.scale == 2.0
        st.record_step(False)
        st.record_step(False)
        assert st.scale == 2.0
        st.record_step(False)
        assert st.scale == 4.0

    def test_constant_policy_never_moves_scale(self):
        st = P.LossScaleState(scale=128.0, policy="constant", window=1)
        st.record_step(True)
        st.record_step(False)
        assert st.scale == 128.0 and st.skipped_batches == 1


class TestMixedUpdate:
    def test_master_copy_captures_update_below_half_resolution(self):
        st = P.LossScaleState()
        master = np.array([1.0], dtype=np.float32)
        gbits, _ = P.to_half_array(np.array([1e-4]))
        new_master, half_bits, skipped = P.mixed_update(master, gbits, 1.0, st)
        assert not skipped
        assert new_master[0] != np.float32(1.0)
        # the pure-half update cannot represent the change
        pure = P.HalfValue.from_float(1.0 - 1e-4)
        assert pure.bits == 0x3C00

    def test_zero_gradient_changes_nothing_and_skips_nothing(self):
        st = P.LossScaleState()
        master = np.array([2.0, -3.0], dtype=np.float32)
        gbits, _ = P.to_half_array(np.zeros(2))
        new_master, _, skipped = P.mixed_update(master, gbits, 0.5, st)
        assert not skipped and st.skipped_batches == 0
        assert np.array_equal(new_master, master)

    def test_infinity_entry_skips_batch_and_counts(self):
        st = P.LossScaleState(scale=8.0)
        master = np.array([1.0, 2.0], dtype=np.float32)
        gbits = np.array([0x7C00, 0x3C00], dtype=np.uint16)
        new_master, _, skipped = P.mixed_update(master, gbits, 0.1, st)
        assert skipped and st.skipped_batches == 1
        assert np.array_equal(new_master, master)

    def test_nan_entry_also_skips(self):
        st = P.LossScaleState()
        gbits = np.array([0x7E00], dtype=np.uint16)
        _, _, skipped = P.mixed_update(np.array([0.0], np.float32), gbits, 0.1, st)
        assert skipped

    def test_skip_touches_no_state_but_the_counter(self):
        st = P.LossScaleState(scale=4.0, policy="constant")
        master = np.array([5.0], dtype=np.float32)
        before = master.copy()
        gbits = np.array([0xFC00], dtype=np.uint16)  # -inf
        new_master, half_bits, _ = P.mixed_update(master, gbits, 1.0, st)
        assert np.array_equal(new_master, before)
        assert st.scale == 4.0
        assert P.from_half_array(half_bits)[0] == 5.0

    def test_unscale_is_applied_before_the_step(self):
        st = P.LossScaleState(scale=4.0)
        master = np.array([0.0], dtype=np.float32)
        gbits, _ = P.to_half_array(np.array([4.0]))  # scaled gradient
        new_master, _, _ = P.mixed_update(master, gbits, 1.0, st)
        assert new_master[0] == np.float32(-1.0)


class TestReductions:
    def test_half_accumulator_saturates_single_does_not(self):
        ones = np.full(4096, 0x3C00, dtype=np.uint16)
        assert P.reduce_single_precision(ones) == 4096.0
        assert P.reduce_half_accumulator(ones).to_float() == 2048.0

    def test_empty_sum_is_zero(self):
        empty = np.array([], dtype=np.uint16)
        assert P.reduce_single_precision(empty) == 0.0
        assert P.reduce_half_accumulator(empty).to_float() == 0.0

    def test_single_accumulator_beats_half_on_random_vectors(self):
        wins = 0
        trials = 100
        for seed in range(trials):
            rng = np.random.default_rng(seed)
            vals = rng.uniform(0.0, 2.0, 10_000)
            bits, _ = P.to_half_array(vals)
            exact = float(np.sum(P.from_half_array(bits)))
            err_single = abs(P.reduce_single_precision(bits) - exact)
            err_half = abs(P.reduce_half_accumulator(bits).to_float() - exact)
            if err_single <= err_half:
                wins += 1
        assert wins >= 99


def test_half_add_rounds_to_nearest_even():
    a = P.HalfValue.from_float(2048.0)
    b = P.HalfValue.from_float(1.0)
    # 2049 ties between 2048 and 2050; even mantissa wins
    assert P.half_add(a, b).to_float() == 2048.0
    assert P.half_add(P.HalfValue.from_float(1.0),
                      P.HalfValue.from_float(1.0)).to_float() == 2.0
