import numpy as np
import pytest

from cdmjscc import link
from cdmjscc import numerics as nm
from cdmjscc.errors import MagicError, TruncatedError, VersionError
from cdmjscc.numerics import RngStream, Tensor


def masses_for_bits(bits_per_vector, width=16):
    """Per-vector conditional masses whose joint information is the given bit count.

    Whole bits are exact: the first ``b`` channels carry mass 1/2.
    """
    rows = []
    for b in bits_per_vector:
        whole = min(int(b), width)
        row = np.ones(width)
        row[:whole] = 0.5
        if b > whole:
            row[-1] = 2.0 ** -(b - whole)
        rows.append(row)
    return np.array(rows)


class TestAllocateRates:
    def test_eight_bits_half_beta(self):
        assert link.allocate_rates(masses_for_bits([8.0]), 0.5, 0, 8).k.tolist() == [4]

    def test_clamps_high(self):
        assert link.allocate_rates(masses_for_bits([1000.0]), 0.5, 0, 8).k.tolist() == [8]

    def test_certain_vector_gets_k_min(self):
        assert link.allocate_rates(np.ones((3, 16)), 0.5, 1, 8).k.tolist() == [1, 1, 1]

    def test_round_half_even(self):
        # 5 bits * 0.5 = 2.5 -> 2 ; 7 bits * 0.5 = 3.5 -> 4
        assert link.allocate_rates(masses_for_bits([5.0, 7.0]), 0.5).k.tolist() == [2, 4]

    def test_grid_input(self):
        grid = np.full((16, 2, 2), 0.5)
        rmap = link.allocate_rates(grid, 0.25)
        assert rmap.k.tolist() == [4, 4, 4, 4]
        assert rmap.k_total == 16

    def test_monotone_in_entropy(self):
        rng = np.random.default_rng(0)
        base = rng.uniform(0.05, 1.0, size=(8, 16))
        richer = base.copy()
        richer[3] *= 0.5
        k0 = link.allocate_rates(base, 0.5).k
        k1 = link.allocate_rates(richer, 0.5).k
        assert k1[3] >= k0[3]
        np.testing.assert_array_equal(np.delete(k1, 3), np.delete(k0, 3))

    def test_beta_must_be_positive(self):
        with pytest.raises(ValueError):
            link.allocate_rates(np.ones((1, 16)), 0.0)

    def test_rate_map_bounds(self):
        with pytest.raises(ValueError):
            link.RateMap(np.array([9]), 0, 8)


class TestOrder:
    def test_two_by_two(self):
        assert link.checkerboard_order(2, 2).tolist() == [0, 3, 1, 2]

    @pytest.mark.parametrize("h,w", [(1, 1), (3, 5), (8, 8), (7, 2)])
    def test_is_permutation(self, h, w):
        order = link.checkerboard_order(h, w)
        np.testing.assert_array_equal(np.sort(order), np.arange(h * w))
        np.testing.assert_array_equal(order[link.inverse_order(order)], np.arange(h * w))

    def test_even_parity_first(self):
        order = link.checkerboard_order(4, 4)
        parity = (order // 4 + order % 4) % 2
        assert parity[:8].sum() == 0 and parity[8:].sum() == 8


class TestFraming:
    def test_single_symbol_normalized(self):
        projected = np.zeros((1, 16))
        projected[0, :2] = [3.0, 4.0]
        frame = link.frame_symbols(projected, link.RateMap(np.array([1])), np.array([0]))
        assert frame.power == pytest.approx(25.0)
        np.testing.assert_allclose(frame.symbols, [(3 + 4j) / 5])

    def test_zero_rate_vector_contributes_nothing(self):
        projected = np.arange(32.0).reshape(2, 16)
        frame = link.frame_symbols(projected, link.RateMap(np.array([0, 2])), np.array([0, 1]))
        assert len(frame.symbols) == 2
        raw = frame.symbols * frame.scale
        np.testing.assert_allclose(raw, [16 + 17j, 18 + 19j])

    def test_unit_power(self):
        rng = RngStream(2)
        for _ in range(20):
            rmap = link.RateMap(rng.integers(0, 9, (16,)))
            if rmap.k_total == 0:
                continue
            frame = link.frame_symbols(rng.gauss((16, 16)) * 7, rmap, link.checkerboard_order(4, 4))
            assert np.mean(np.abs(frame.symbols) ** 2) == pytest.approx(1.0, abs=1e-9)

    def test_empty_frame_rejected(self):
        with pytest.raises(ValueError):
            link.frame_symbols(np.ones((2, 16)), link.RateMap(np.zeros(2)), np.array([0, 1]))

    def test_k_max_above_half_width_rejected(self):
        with pytest.raises(ValueError):
            link.frame_symbols(np.ones((1, 4)), link.RateMap(np.array([1]), 0, 8), np.array([0]))


class TestChannel:
    def test_noise_variance_from_db(self):
        assert link.noise_variance(10.0) == pytest.approx(0.1)
        assert link.noise_variance(0.0) == pytest.approx(1.0)
        assert link.noise_variance(float("inf")) == 0.0

    def test_high_snr_is_transparent(self):
        rng = RngStream(5)
        frame = link.frame_symbols(rng.gauss((8, 16)), link.RateMap(np.full(8, 8)), np.arange(8))
        out = link.awgn(frame, 300.0, RngStream(6))
        assert np.max(np.abs(out.symbols - frame.symbols)) < 1e-12

    def test_zero_db_statistics(self):
        L = 125_000
        frame = link.frame_symbols(np.ones((L, 16)), link.RateMap(np.full(L, 8)), np.arange(L))
        noise = link.awgn(frame, 0.0, RngStream(7)).symbols - frame.symbols
        assert np.mean(np.abs(noise) ** 2) == pytest.approx(1.0, rel=0.01)
        assert np.var(noise.real) == pytest.approx(0.5, rel=0.01)
        assert np.var(noise.imag) == pytest.approx(0.5, rel=0.01)

    def test_awgn_deterministic(self):
        frame = link.frame_symbols(np.ones((4, 16)), link.RateMap(np.full(4, 3)), np.arange(4))
        a = link.awgn(frame, 5.0, RngStream(9)).symbols
        b = link.awgn(frame, 5.0, RngStream(9)).symbols
        np.testing.assert_array_equal(a, b)


class TestUnframe:
    def test_infinite_snr_round_trip(self):
        rng = RngStream(10)
        projected = rng.gauss((16, 16)).astype(np.float64)
        rmap = link.RateMap(rng.integers(1, 9, (16,)))
        frame = link.frame_symbols(projected, rmap, link.checkerboard_order(4, 4))
        out = link.unframe_symbols(link.awgn(frame, float("inf"), rng))
        expected = projected * link.rate_mask(rmap.k, 16)
        assert np.max(np.abs(out - expected)) < 1e-12

    def test_zero_rate_row_is_zero(self):
        frame = link.frame_symbols(np.ones((2, 16)), link.RateMap(np.array([0, 3])), np.array([0, 1]))
        out = link.unframe_symbols(frame)
        np.testing.assert_array_equal(out[0], 0.0)
        np.testing.assert_allclose(out[1, :6], 1.0)
        np.testing.assert_array_equal(out[1, 6:], 0.0)

    def test_random_round_trips(self):
        rng = np.random.default_rng(11)
        for _ in range(1000):
            h, w = rng.integers(1, 6, size=2)
            L = h * w
            k = rng.integers(0, 9, size=L)
            if k.sum() == 0:
                k[0] = 1
            projected = rng.normal(size=(L, 16)) * rng.uniform(0.1, 10)
            order = link.checkerboard_order(h, w)
            out = link.unframe_symbols(link.frame_symbols(projected, link.RateMap(k), order))
            np.testing.assert_allclose(out, projected * (np.arange(16) < 2 * k[:, None]), rtol=0, atol=1e-12)

    def test_symbol_count_mismatch(self):
        frame = link.frame_symbols(np.ones((2, 16)), link.RateMap(np.array([1, 1])), np.array([0, 1]))
        frame.symbols = frame.symbols[:1]
        with pytest.raises(ValueError):
            link.unframe_symbols(frame)


class TestCbr:
    def test_reference_operating_points(self):
        assert link.cbr(64, 3 * 32 * 32) == pytest.approx(1 / 48, abs=1e-15)
        assert link.cbr(128, 3072) == pytest.approx(1 / 24, abs=1e-15)

    def test_zero(self):
        assert link.cbr(link.RateMap(np.zeros(4)), 3072) == 0.0

    def test_bad_source(self):
        with pytest.raises(ValueError):
            link.cbr(1, 0)


class TestChannelPass:
    def test_matches_frame_path_without_noise(self):
        with nm.precision(64):
            rng = RngStream(12)
            projected = rng.gauss((2, 4, 16))
            k = rng.integers(0, 9, (2, 4))
            out = link.channel_pass(Tensor(projected), k, float("inf"), rng).data
        np.testing.assert_allclose(out, projected * link.rate_mask(k, 16))

    def test_noise_scaled_to_signal_power(self):
        with nm.precision(64):
            projected = np.full((1, 5000, 16), 3.0)
            k = np.full((1, 5000), 8)
            out = link.channel_pass(Tensor(projected), k, 0.0, RngStream(13)).data
        noise = (out - projected).reshape(-1)
        # symbol power 18 per complex pair, noise 18 at 0 dB -> 9 per real
        assert np.var(noise) == pytest.approx(9.0, rel=0.03)

    def test_masked_slots_stay_zero(self):
        out = link.channel_pass(Tensor(np.ones((1, 2, 16))), np.array([[0, 2]]), 0.0, RngStream(14)).data
        np.testing.assert_array_equal(out[0, 0], 0.0)
        np.testing.assert_array_equal(out[0, 1, 4:], 0.0)


def _frame(seed=15):
    rng = RngStream(seed)
    rmap = link.RateMap(rng.integers(0, 9, (16,)))
    return link.frame_symbols(rng.gauss((16, 16)), rmap, link.checkerboard_order(4, 4))


class TestWireFormat:
    def test_round_trip_bit_exact(self):
        blob = link.encode_frame(_frame())
        back = link.decode_frame(blob, 16)
        assert link.encode_frame(back) == blob

    def test_decoded_rates_and_symbols(self):
        frame = _frame()
        back = link.decode_frame(link.encode_frame(frame), 16)
        np.testing.assert_array_equal(back.rate_map.k, frame.rate_map.k)
        np.testing.assert_allclose(back.symbols, frame.symbols, atol=1e-6)
        assert back.scale == frame.scale

    def test_header_layout(self):
        blob = link.encode_frame(_frame())
        assert blob[:4] == b"CJSF"
        assert int.from_bytes(blob[4:6], "little") == 1
        assert int.from_bytes(blob[6:10], "little") == 16

    def test_bad_magic(self):
        blob = link.encode_frame(_frame())
        with pytest.raises(MagicError):
            link.decode_frame(b"JUNK" + blob[4:], 16)

    def test_future_version(self):
        blob = link.encode_frame(_frame())
        with pytest.raises(VersionError):
            link.decode_frame(blob[:4] + (2).to_bytes(2, "little") + blob[6:], 16)

    @pytest.mark.parametrize("cut", [5, 12, 60, -1])
    def test_truncation(self, cut):
        blob = link.encode_frame(_frame())
        with pytest.raises(TruncatedError):
            link.decode_frame(blob[:cut], 16)


class TestRateMask:
    def test_prefix(self):
        m = link.rate_mask(np.array([0, 1, 3]), 6)
        np.testing.assert_array_equal(m.sum(axis=-1), [0, 2, 6])
        np.testing.assert_array_equal(m[1], [1, 1, 0, 0, 0, 0])

    def test_k_above_capacity(self):
        with pytest.raises(ValueError):
            link.rate_mask(np.array([4]), 6)
