"""Tests for STFT/ISTFT, log-power features, and the spectral baseline."""

import numpy as np
import pytest

from wmse.data import philox, synthesize_corpus
from wmse.numerics import grad_check
from wmse.spectral import (
    DdaeNetwork,
    DdaeSpec,
    StftConfig,
    assemble_context,
    ddae_enhance,
    ddae_lps_mse,
    export_spectrogram,
    istft,
    lps,
    lps_invert,
    stft,
    train_ddae,
)
from wmse.training import TrainConfig


class TestStft:
    def test_cola_constant(self):
        cfg = StftConfig()
        profile = cfg.cola_profile(20)
        interior = profile[cfg.frame_length:-cfg.frame_length]
        assert np.max(np.abs(interior - 1.0)) < 1e-10

    def test_roundtrip_noise(self):
        cfg = StftConfig()
        rng = philox(1)
        for trial in range(5):
            x = rng.normal(0, 0.3, 16000)
            y = istft(stft(x, cfg), cfg, length=x.size)
            lo, hi = cfg.frame_length, (x.size // cfg.hop - 2) * cfg.hop
            err = np.sqrt(np.mean((x[lo:hi] - y[lo:hi]) ** 2))
            assert err < 1e-6

    def test_sine_energy_concentrated(self):
        cfg = StftConfig()
        bin_idx = 40
        freq = bin_idx * cfg.sample_rate / cfg.frame_length
        t = np.arange(8192)
        spec = np.abs(stft(np.sin(2 * np.pi * freq * t / cfg.sample_rate), cfg))
        interior = spec[2:-2]
        peak_bins = np.argmax(interior, axis=1)
        assert np.all(peak_bins == bin_idx)
        side = interior.copy()
        side[:, bin_idx - 1:bin_idx + 2] = 0.0
        assert side.max() < 0.01 * interior.max()

    def test_zero_signal(self):
        assert not np.abs(stft(np.zeros(4096))).any()

    def test_too_short(self):
        with pytest.raises(ValueError):
            stft(np.zeros(100))


class TestLps:
    def test_unit_magnitude_near_zero(self):
        spec = np.full((3, 5), 1.0 + 0j)
        assert np.max(np.abs(lps(spec))) < 1e-9

    def test_invert_with_own_phase(self):
        rng = philox(2)
        x = rng.normal(0, 0.3, 8192)
        spec = stft(x)
        rebuilt = lps_invert(lps(spec), np.angle(spec))
        rel = np.linalg.norm(rebuilt - spec) / np.linalg.norm(spec)
        assert rel < 1e-8

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            lps_invert(np.zeros((2, 3)), np.zeros((3, 2)))


class TestAssembleContext:
    def test_shapes_and_edge_replication(self):
        mats = [np.arange(12.0).reshape(4, 3)]
        ctx = assemble_context(mats, context=1)
        assert ctx.shape == (4, 9)
        np.testing.assert_array_equal(ctx[0, :3], mats[0][0])   # replicated edge
        np.testing.assert_array_equal(ctx[0, 3:6], mats[0][0])
        np.testing.assert_array_equal(ctx[0, 6:9], mats[0][1])

    def test_multichannel_width(self):
        mats = [np.zeros((5, 4)), np.zeros((5, 4))]
        assert assemble_context(mats, context=2).shape == (5, 2 * 5 * 4)


class TestDdae:
    def test_spec_requires_five_layers(self):
        with pytest.raises(ValueError):
            DdaeSpec(input_channels=2, hidden_sizes=[64] * 4)

    def test_census_formula(self):
        spec = DdaeSpec(input_channels=2, hidden_sizes=[32] * 5, context=1, bins=17)
        net = DdaeNetwork(spec, seed=0)
        widths = [spec.input_dim] + [32] * 5 + [17]
        expected = sum(widths[i] * widths[i + 1] + widths[i + 1]
                       for i in range(len(widths) - 1))
        assert sum(p.size for p in net.parameters()) == expected

    def test_zero_input_bounded(self):
        spec = DdaeSpec(input_channels=1, hidden_sizes=[16] * 5, context=1, bins=9)
        net = DdaeNetwork(spec, seed=1)
        out = net.forward(np.zeros((3, spec.input_dim)))
        assert out.shape == (3, 9)
        assert np.all(np.isfinite(out))

    def test_gradients(self):
        spec = DdaeSpec(input_channels=1, hidden_sizes=[8] * 5, context=1, bins=5)
        net = DdaeNetwork(spec, seed=2)
        x = philox(3).uniform(-1, 1, (4, spec.input_dim))
        assert grad_check(net, x, tolerance=1e-4).passed

    def test_overfit_two_utterances(self):
        corpus = synthesize_corpus("iem", 2, seed=6, segment_length=4096)
        cfg = StftConfig()
        spec = DdaeSpec(input_channels=2, hidden_sizes=[64] * 5, context=2)
        net = DdaeNetwork(spec, seed=3)
        tc = TrainConfig(max_epochs=1000, batch_size=1, seed=4, validation=False,
                         run_all_epochs=True)
        log = train_ddae(net, corpus, tc, cfg)
        assert log.train_mse[-1] < 1e-2
        assert net.trained

    def test_enhance_and_lps_mse(self):
        corpus = synthesize_corpus("dm", 2, seed=7, segment_length=4096)
        spec = DdaeSpec(input_channels=5, hidden_sizes=[32] * 5, context=1)
        net = DdaeNetwork(spec, seed=5)
        tc = TrainConfig(max_epochs=3, batch_size=1, seed=6, validation=False,
                         run_all_epochs=True)
        train_ddae(net, corpus, tc)
        out = ddae_enhance(net, corpus[0])
        assert out.shape == (corpus[0].length,)
        assert np.max(np.abs(out)) <= 1.0
        enhanced_mse, noisy_mse = ddae_lps_mse(net, corpus[0])
        assert np.isfinite(enhanced_mse) and np.isfinite(noisy_mse)


class TestExports:
    def test_spectrogram_files(self, tmp_path):
        rng = philox(9)
        export_spectrogram(rng.normal(0, 0.2, 4096), tmp_path / "spec")
        assert (tmp_path / "spec.csv").exists()
        assert (tmp_path / "spec.png").read_bytes()[:4] == b"\x89PNG"
