"""View features checked against straight-line oracles and their invariances."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from polyfeat.cache import Record, write_records
from polyfeat.features import (
    LOG_FLOOR,
    CqtConfig,
    FeatureError,
    FileProjector,
    StandInProjector,
    compute_view,
    cqt_log_magnitude,
    lower_median,
    mfcc,
    neuralogram,
    patch_waveform,
    peak_map,
    pitch_map,
)

from oracles import SR, brute_peak_map, oracle_cqt_entry, oracle_mfcc_frame, sine


class TestCqt:
    def test_config_geometry(self):
        cfg = CqtConfig()
        np.testing.assert_allclose(cfg.center_freqs()[[0, 12, 79]], [40.0, 80.0, 40 * 2 ** (79 / 12)])
        assert cfg.center_freqs()[-1] < 8000
        assert cfg.window_lengths()[0] == int(np.ceil(cfg.q * SR / 40.0))

    def test_zero_chunk_hits_floor(self):
        out = cqt_log_magnitude(np.zeros(SR))
        assert out.shape == (80, 40)
        np.testing.assert_array_equal(out, np.log(LOG_FLOOR))
        assert out[0, 0] == pytest.approx(-23.026, abs=1e-3)

    def test_440_localises(self):
        out = cqt_log_magnitude(sine(440.0))
        interior = out[:, 2:-2]
        assert set(np.argmax(interior, axis=0)) <= {41, 42}

    @pytest.mark.parametrize("b,t", [(0, 0), (5, 39), (41, 20), (42, 1), (79, 17)])
    def test_matches_direct_oracle(self, b, t):
        x = sine(440.0) + 0.3 * np.random.default_rng(b + t).standard_normal(SR)
        got = cqt_log_magnitude(x)[b, t]
        assert got == pytest.approx(oracle_cqt_entry(x, b, t), abs=1e-9)

    def test_half_gain_shifts_by_ln2(self):
        x = np.random.default_rng(0).standard_normal(SR)
        a, b = cqt_log_magnitude(x), cqt_log_magnitude(0.5 * x)
        above = b > np.log(LOG_FLOOR)
        np.testing.assert_allclose((a - b)[above], np.log(2.0), atol=1e-9)

    def test_wrong_length(self):
        with pytest.raises(FeatureError, match="16000"):
            cqt_log_magnitude(np.zeros(100))


class TestPeakMap:
    def test_constant_is_all_ones(self):
        np.testing.assert_array_equal(peak_map(np.full((80, 40), 3.0)), 1.0)

    def test_toy_column(self):
        m = np.full((80, 1), -5.0)
        m[:7, 0] = [0, 1, 2, 9, 2, 1, 0]
        got = peak_map(m)
        np.testing.assert_array_equal(got, brute_peak_map(m))
        assert got[3, 0] == 1.0 and got[:3, 0].sum() == 0 and got[4:7, 0].sum() == 0
        # the -5 plateau ties the median; bins clear of bin 6's neighbourhood are peaks
        np.testing.assert_array_equal(got[9:, 0], 1.0)
        np.testing.assert_array_equal(got[7:9, 0], 0.0)

    def test_lower_median(self):
        assert lower_median(np.array([4.0, 1.0, 3.0, 2.0])) == 2.0

    def test_440_support(self):
        mask = pitch_map(sine(440.0))
        interior = mask[:, 2:-2]
        assert np.all(interior[41] + interior[42] >= 1)
        top = np.argsort(mask.sum(axis=1))[::-1][:2]
        assert set(top) & {41, 42}

    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1), levels=st.integers(2, 50))
    def test_brute_force_agreement(self, seed, levels):
        # few distinct levels forces plateaus and median ties
        m = np.random.default_rng(seed).integers(0, levels, size=(80, 40)).astype(float)
        got = peak_map(m)
        assert set(np.unique(got)) <= {0.0, 1.0}
        np.testing.assert_array_equal(got, brute_peak_map(m))

    def test_rejects_non_finite(self):
        m = np.zeros((80, 40))
        m[0, 0] = np.nan
        with pytest.raises(FeatureError):
            peak_map(m)


class TestMfcc:
    def test_zero_chunk(self):
        out = mfcc(np.zeros(SR))
        assert out.shape == (12, 40)
        np.testing.assert_allclose(out, 0.0, atol=1e-12)

    def test_gain_invariance(self):
        x = np.random.default_rng(2).standard_normal(SR) * 0.1
        np.testing.assert_allclose(mfcc(x), mfcc(2.0 * x), atol=1e-9)

    def test_440_first_coefficient_steady(self):
        c1 = mfcc(sine(440.0))[0, 2:-2]
        assert np.ptp(c1) < 1e-3

    @pytest.mark.parametrize("t", [0, 7, 20, 39])
    def test_matches_single_frame_oracle(self, t):
        x = sine(440.0, 0.4) + 0.1 * np.random.default_rng(t).standard_normal(SR)
        np.testing.assert_allclose(mfcc(x)[:, t], oracle_mfcc_frame(x, t), atol=1e-6)


class TestPatches:
    def test_ramp(self):
        p = patch_waveform(np.arange(SR, dtype=float))
        assert p.shape == (40, 400)
        assert p[7, 13] == 7 * 400 + 13

    def test_zero_and_round_trip(self):
        np.testing.assert_array_equal(patch_waveform(np.zeros(SR)), 0.0)
        x = np.random.default_rng(3).standard_normal(SR)
        np.testing.assert_array_equal(patch_waveform(x).reshape(-1), x)


class TestNeuralogram:
    def test_identity_projector(self):
        calls = []

        def first(seg, *, clip_id, chunk_index, column):
            calls.append(column)
            return seg[:1024]

        x = np.arange(SR, dtype=float)
        out = neuralogram(x, first)
        assert out.shape == (1024, 10) and calls == list(range(10))
        np.testing.assert_array_equal(out[:, 3], x[4800:4800 + 1024])

    def test_stand_in_deterministic(self):
        x = np.random.default_rng(4).standard_normal(SR)
        a = neuralogram(x, StandInProjector(5))
        b = neuralogram(x, StandInProjector(5))
        np.testing.assert_array_equal(a, b)
        assert a.shape == (1024, 10) and np.all(np.isfinite(a))
        assert not np.array_equal(a, neuralogram(x, StandInProjector(6)))

    def test_bad_projector_output(self):
        with pytest.raises(FeatureError, match="shape"):
            neuralogram(np.zeros(SR), lambda seg, **_: seg[:10])
        with pytest.raises(FeatureError, match="non-finite"):
            neuralogram(np.zeros(SR), lambda seg, **_: np.full(1024, np.inf))

    def test_file_projector(self, tmp_path):
        cols = np.random.default_rng(5).standard_normal((1024, 10)).astype(np.float32)
        write_records(tmp_path / "n.pfv1", [Record("clipA", 0, "neuralogram", cols)])
        proj = FileProjector(tmp_path / "n.pfv1")
        got = compute_view("neuralogram", np.zeros(SR), proj, "clipA", 0)
        np.testing.assert_array_equal(got, cols)
        with pytest.raises(FeatureError, match="missing precomputed embedding"):
            compute_view("neuralogram", np.zeros(SR), proj, "clipA", 1)

    def test_unknown_view(self):
        with pytest.raises(FeatureError, match="unknown view"):
            compute_view("colour", np.zeros(SR))
