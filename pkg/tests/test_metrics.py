"""Tests for the evaluation metrics."""

import json

import numpy as np
import pytest

from utils.dsp_utils import StftConfig
from utils.metric_utils import (
    MetricReport,
    lsd,
    mel_log_error,
    random_crop,
    si_snr,
    si_snr_best_permutation,
)


def _tone(freq_bins, length=1024):
    n = np.arange(length)
    return np.sin(2.0 * np.pi * freq_bins * n / length)


class TestSiSnr:
    def test_identical_signals_hit_the_cap(self):
        x = np.random.default_rng(0).standard_normal(500)
        assert si_snr(x, x) == 100.0

    def test_scale_and_offset_invariant(self):
        rng = np.random.default_rng(1)
        ref = rng.standard_normal(500)
        est = ref + 0.3 * rng.standard_normal(500)
        assert si_snr(ref, 3.0 * est + 2.0) == pytest.approx(si_snr(ref, est), abs=1e-9)

    def test_orthogonal_noise_at_ten_db(self):
        ref = _tone(5)
        noise = np.sqrt(0.1) * np.cos(2.0 * np.pi * 5 * np.arange(1024) / 1024)
        assert si_snr(ref, ref + noise) == pytest.approx(10.0, abs=1e-6)

    def test_silent_estimate_floor(self):
        assert si_snr(_tone(3), np.zeros(1024)) == -100.0

    def test_errors(self):
        with pytest.raises(ValueError):
            si_snr(np.ones(10), np.zeros(10))
        with pytest.raises(ValueError):
            si_snr(np.zeros(10), np.zeros(11))


class TestLsd:
    def test_identical_is_zero(self):
        x = np.random.default_rng(2).standard_normal(4000)
        assert lsd(x, x) == 0.0

    def test_gain_of_ten_is_two(self):
        """A 20 dB gain shifts every log10 power value by exactly 2."""
        x = np.random.default_rng(3).standard_normal(4000)
        assert lsd(x, 10.0 * x, StftConfig(n_fft=256, hop=64)) == pytest.approx(2.0, abs=1e-9)

    def test_low_band_ignores_high_band_errors(self):
        rng = np.random.default_rng(4)
        x = rng.standard_normal(4000)
        cfg = StftConfig(n_fft=256, hop=64)
        high = np.fft.irfft(np.fft.rfft(rng.standard_normal(4000)) * (np.fft.rfftfreq(4000, 1 / 16000) > 6000), 4000)
        full = lsd(x, x + high, cfg)
        low = lsd(x, x + high, cfg, max_freq_hz=2000.0, sample_rate=16000)
        assert low < 0.05 < full

    def test_errors(self):
        with pytest.raises(ValueError):
            lsd(np.ones(100), np.ones(100))
        with pytest.raises(ValueError):
            lsd(np.ones(2000), np.ones(2000), max_freq_hz=-1.0)


class TestPermutation:
    def test_swapped_estimates(self):
        rng = np.random.default_rng(5)
        a, b = rng.standard_normal((2, 300))
        perm, score = si_snr_best_permutation([a, b], [b + 0.01 * a, a])
        assert perm == (1, 0)
        assert score > 30.0

    def test_needs_two_sources(self):
        with pytest.raises(ValueError):
            si_snr_best_permutation([np.ones(3)], [np.ones(3)])


class TestHelpers:
    def test_mel_log_error(self):
        assert mel_log_error(np.zeros((2, 3)), np.full((2, 3), -0.5)) == 0.5
        with pytest.raises(ValueError):
            mel_log_error(np.zeros((2, 3)), np.zeros((3, 2)))

    def test_random_crop_shares_offset(self):
        a = np.arange(100.0)
        ca, cb = random_crop([a, a + 1000.0], 30, np.random.default_rng(6))
        assert ca.size == 30
        np.testing.assert_array_equal(cb - ca, 1000.0)

    def test_random_crop_passthrough(self):
        a = np.arange(10.0)
        (out,) = random_crop([a], 0, np.random.default_rng(0))
        np.testing.assert_array_equal(out, a)
        (out,) = random_crop([a], 50, np.random.default_rng(0))
        np.testing.assert_array_equal(out, a)
        with pytest.raises(ValueError):
            random_crop([a, np.arange(5.0)], 3, np.random.default_rng(0))


class TestMetricReport:
    def test_record_skips_missing_values(self):
        report = MetricReport(task="vocode", extras={"mel_log_error": 0.25})
        assert report.to_record() == {"task": "vocode", "extras": {"mel_log_error": 0.25}}
        assert "mel_log_error=0.250" in report.summary()

    def test_write(self, tmp_path):
        report = MetricReport(task="bwe", si_snr_db=12.5, lsd=0.8, extras={"input_lsd": 3.0})
        path = report.write(tmp_path / "bwe_metrics.json")
        data = json.loads(path.read_text())
        assert data == {"task": "bwe", "si_snr_db": 12.5, "lsd": 0.8, "extras": {"input_lsd": 3.0}}
