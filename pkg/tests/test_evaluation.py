"""Tests for the intelligibility metric, waveform MSE, and the
first-layer analysis exports."""

import numpy as np
import pytest

from wmse.data import philox, synthetic_speech
from wmse.evaluation import (
    MetricsReport,
    StoiConfig,
    analyze_filters,
    first_layer_features,
    mse_metric,
    passband_coverage,
    stoi,
)
from wmse.models import build_named_model, instantiate
from wmse.numerics import mse_loss


@pytest.fixture(scope="module")
def voiced():
    return synthetic_speech(24000, philox(42))


class TestStoi:
    def test_self_score_is_one(self, voiced):
        assert stoi(voiced, voiced) == pytest.approx(1.0, abs=1e-9)

    def test_range_on_random_pairs(self, voiced):
        rng = philox(4)
        for _ in range(25):
            noisy = voiced + rng.normal(0, rng.uniform(0.01, 0.5), voiced.size)
            assert 0.0 <= stoi(voiced, noisy) <= 1.0

    def test_monotone_in_snr(self, voiced):
        rng = philox(5)
        noise = rng.standard_normal(voiced.size)
        scores = []
        for snr in (20, 10, 0, -5):
            scale = np.sqrt(np.mean(voiced ** 2) / np.mean(noise ** 2) / 10 ** (snr / 10))
            scores.append(stoi(voiced, voiced + scale * noise))
        assert scores == sorted(scores, reverse=True)

    def test_decorrelated_signals_low(self, voiced):
        # envelope-decorrelated signal scores low; pure noise sits at the
        # clipping rule's floor (~0.4), so it only gets the loose bound
        assert stoi(voiced, voiced[::-1].copy()) < 0.3
        assert stoi(voiced, 0.2 * philox(6).standard_normal(voiced.size)) < 0.5

    def test_scale_invariance(self, voiced):
        rng = philox(7)
        noisy = voiced + 0.05 * rng.standard_normal(voiced.size)
        base = stoi(voiced, noisy)
        for scale in (0.1, 0.5, 2.0):
            assert stoi(voiced, scale * noisy) == pytest.approx(base, abs=1e-6)

    def test_length_mismatch(self, voiced):
        with pytest.raises(ValueError):
            stoi(voiced, voiced[:-1])

    def test_zero_reference_rejected(self):
        with pytest.raises(ValueError):
            stoi(np.zeros(16000), np.ones(16000))

    def test_too_short_rejected(self):
        x = philox(8).standard_normal(1000)
        with pytest.raises(ValueError):
            stoi(x, x)

    def test_band_matrix_covers_15_bands(self):
        cfg = StoiConfig()
        obm = cfg.band_matrix()
        assert obm.shape[0] == 15
        assert np.all(obm.sum(axis=1) >= 1)
        lo, hi = cfg.band_edges()
        assert np.all(np.diff(lo) > 0) and hi[-1] < cfg.internal_rate / 2


class TestMseMetric:
    def test_identical(self, voiced):
        assert mse_metric(voiced, voiced) == 0.0

    def test_negated_sine_closed_form(self):
        t = np.arange(16000)
        x = np.sin(2 * np.pi * 220 * t / 16000)
        x /= np.max(np.abs(x))
        # mean((x - (-x))^2) = 4 mean(x^2); for a unit sine that is 2.0
        assert mse_metric(x, -x) == pytest.approx(4 * np.mean(x ** 2))
        assert mse_metric(x, -x) == pytest.approx(2.0, abs=1e-3)

    def test_matches_numerics_loss(self, voiced):
        rng = philox(9)
        other = np.clip(voiced + 0.1 * rng.standard_normal(voiced.size), -1, 1)
        assert mse_metric(voiced, other) == mse_loss(other, voiced)

    def test_requires_normalization(self, voiced):
        with pytest.raises(ValueError):
            mse_metric(voiced * 3.0, voiced)


class TestMetricsReport:
    def test_means_and_csv(self, tmp_path):
        rep = MetricsReport(model_id="m", corpus_id="c", seed=1)
        rep.add(0, 0.8, 0.01)
        rep.add(1, 0.9, 0.02)
        assert rep.mean_stoi == pytest.approx(0.85)
        rep.write_csv(tmp_path / "metrics.csv")
        lines = (tmp_path / "metrics.csv").read_text().strip().splitlines()
        assert lines[0] == "utterance_id,stoi,mse"
        assert lines[-1].startswith("mean,")

    def test_rejects_out_of_range_stoi(self):
        rep = MetricsReport(model_id="m", corpus_id="c", seed=1)
        with pytest.raises(ValueError):
            rep.add(0, 1.2, 0.0)


class TestAnalyzeFilters:
    def test_sinc_rows_and_monotone_init(self, tmp_path):
        net = instantiate(build_named_model("SDFCN", 2, channels=8), seed=0)
        rows = analyze_filters(net, out_dir=tmp_path)
        assert len(rows) == 8 * 2
        peaks = [r["f_peak_hz"] for r in rows]
        assert all(b >= a - 40 for a, b in zip(peaks, peaks[1:]))  # DFT-bin slack
        assert (tmp_path / "filters.csv").exists()
        assert (tmp_path / "filters.png").read_bytes()[:4] == b"\x89PNG"

    def test_constructed_bandpass_peak_in_band(self):
        from wmse.data import windowed_sinc_bandpass
        from wmse.numerics import ConvLayer

        net = instantiate(build_named_model("FCN-55", 1, channels=1), seed=0)
        first = net.stages[0].layers[0]
        assert isinstance(first, ConvLayer)
        first.kernels.value[0, 0, :] = windowed_sinc_bandpass(1000.0, 3000.0, taps=55)
        row = analyze_filters(net)[0]
        assert 1000.0 <= row["f_peak_hz"] <= 3000.0

    def test_zero_kernel_flat_zero(self):
        net = instantiate(build_named_model("FCN-55", 1, channels=1), seed=0)
        net.stages[0].layers[0].kernels.value[:] = 0.0
        row = analyze_filters(net)[0]
        assert row["bw_hz"] == 0.0

    def test_sinc_cutoff_columns_present(self):
        net = instantiate(build_named_model("SincFCN-251", 1, channels=4), seed=0)
        rows = analyze_filters(net)
        assert all(isinstance(r["f_low_hz"], float) for r in rows)


class TestFirstLayerFeatures:
    def test_zero_input_zero_image(self):
        net = instantiate(build_named_model("SDFCN", 2, channels=6), seed=1)
        image = first_layer_features(net, np.zeros(2000))
        assert image.shape == (6, 2000)
        assert np.max(image) == 0.0

    def test_probe_tone_hits_matching_band(self):
        net = instantiate(build_named_model("SDFCN", 1, channels=12), seed=1)
        t = np.arange(6000)
        tone = 0.5 * np.sin(2 * np.pi * 1000.0 * t / 16000)
        image = first_layer_features(net, tone)
        strongest = int(np.argmax(image.mean(axis=1)))
        sk = net.front.cutoffs()
        f_lo = sk.f_low.ravel()[strongest] * 16000
        f_hi = sk.f_high.ravel()[strongest] * 16000
        assert f_lo <= 1000.0 <= f_hi

    def test_row_count_equals_filter_count(self, tmp_path):
        net = instantiate(build_named_model("FCN-251", 2, channels=7), seed=1)
        image = first_layer_features(net, np.ones(1500) * 0.1, out_dir=tmp_path)
        assert image.shape[0] == 7
        assert (tmp_path / "features.png").exists()
        assert (tmp_path / "features.csv").exists()


class TestPassbandCoverage:
    def test_mel_init_covers_most_of_range(self):
        net = instantiate(build_named_model("SDFCN", 2, channels=15), seed=0)
        assert passband_coverage(net) > 0.9

    def test_narrow_bands_cover_little(self):
        net = instantiate(build_named_model("SDFCN", 1, channels=4), seed=0)
        net.front.raw_low.value[:] = 0.01
        net.front.raw_bandwidth.value[:] = 0.0
        assert passband_coverage(net) < 0.1

    def test_conv_first_layer_rejected(self):
        net = instantiate(build_named_model("FCN-55", 1, channels=2), seed=0)
        with pytest.raises(ValueError):
            passband_coverage(net)
