"""Tests for sinc kernels, cutoff reparameterization, receptive-field
arithmetic, and the block constructors."""

import itertools

import numpy as np
import pytest

from wmse.layers import (
    DilatedBlockSpec,
    F_MIN,
    SAMPLE_RATE,
    SincConvLayer,
    SincKernel,
    build_conv_block,
    build_dilated_block,
    mel_initial_cutoffs,
    receptive_field,
    sinc_cutoff_reparam,
    sinc_kernel_materialize,
)
from wmse.numerics import ConvLayer, conv1d_raw, grad_check


class TestReceptiveField:
    def test_paper_anchor_18(self):
        assert receptive_field([2, 3, 3], [1, 2, 6]) == 18

    def test_paper_anchor_54(self):
        assert receptive_field([2, 3, 3, 3], [1, 2, 6, 18]) == 54

    @pytest.mark.parametrize("k", [1, 2, 3, 7, 55])
    def test_single_layer(self, k):
        assert receptive_field([k], [1]) == k

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            receptive_field([], [])

    def test_matches_valid_conv_length_collapse(self):
        # every expansion-scheme combination with <= 4 layers, kernels <= 4
        rng = np.random.Generator(np.random.Philox(key=1))
        for depth in (1, 2, 3, 4):
            for kernels in itertools.product((1, 2, 3, 4), repeat=depth):
                dilations = [1]
                for k in kernels[:-1]:
                    dilations.append(dilations[-1] * k)
                rf = receptive_field(kernels, dilations)
                x = rng.standard_normal((1, rf))
                for k, d in zip(kernels, dilations):
                    kern = rng.standard_normal((1, 1, k))
                    x, _ = conv1d_raw(x, kern, np.zeros(1), d, "valid")
                assert x.shape[1] == 1, (kernels, dilations)

    def test_expansion_scheme_equals_kernel_product(self):
        for kernels in itertools.product((2, 3, 4), repeat=3):
            dilations = [1]
            for k in kernels[:-1]:
                dilations.append(dilations[-1] * k)
            assert receptive_field(kernels, dilations) == int(np.prod(kernels))


class TestCutoffReparam:
    def test_zero_raws_hit_lower_bounds(self):
        f_low, f_high = sinc_cutoff_reparam(0.0, 0.0)
        assert f_low == pytest.approx(F_MIN)
        assert f_high == pytest.approx(2 * F_MIN)

    def test_nyquist_clipped(self):
        _, f_high = sinc_cutoff_reparam(0.2, 10.0)
        assert f_high == pytest.approx(0.5 - 1e-3)

    def test_property_sweep(self):
        rng = np.random.Generator(np.random.Philox(key=2))
        raws = rng.uniform(-10, 10, size=(500, 2))
        f_low, f_high = sinc_cutoff_reparam(raws[:, 0], raws[:, 1])
        assert np.all(f_low > 0)
        assert np.all(f_low < f_high)
        assert np.all(f_high < 0.5)

    def test_continuity_at_fold(self):
        lo1, _ = sinc_cutoff_reparam(0.49 - 1e-9, 0.1)
        lo2, _ = sinc_cutoff_reparam(0.49 + 1e-9, 0.1)
        assert abs(lo1 - lo2) < 1e-6


class TestSincKernel:
    def test_equal_cutoffs_rejected_but_zero_limit(self):
        # f_low == f_high violates the ordering invariant; the limiting
        # kernel as they approach is zero
        f = 0.1
        sk = SincKernel(np.array([[f]]), np.array([[f + 1e-12]]), kernel_length=31)
        v = sinc_kernel_materialize(sk)
        assert np.max(np.abs(v)) < 1e-10

    def test_center_tap_value(self):
        sk = SincKernel(np.array([[0.05]]), np.array([[0.2]]), kernel_length=251)
        v = sinc_kernel_materialize(sk)
        mid = (251 - 1) // 2
        assert v[0, 0, mid] == pytest.approx(2 * (0.2 - 0.05))  # hamming peak is 1.0

    def test_even_symmetry(self):
        rng = np.random.Generator(np.random.Philox(key=3))
        for _ in range(20):
            fl = rng.uniform(0.01, 0.3)
            fh = fl + rng.uniform(0.02, 0.15)
            sk = SincKernel(np.array([[fl]]), np.array([[min(fh, 0.49)]]), kernel_length=101)
            v = sinc_kernel_materialize(sk)[0, 0]
            assert np.max(np.abs(v - v[::-1])) < 1e-12

    def test_band_pass_dft(self):
        sk = SincKernel(np.array([[0.05]]), np.array([[0.2]]), kernel_length=251)
        v = sinc_kernel_materialize(sk)[0, 0]
        mag = np.abs(np.fft.rfft(v, n=4096))
        freqs = np.fft.rfftfreq(4096)
        peak_f = freqs[np.argmax(mag)]
        assert 0.05 <= peak_f <= 0.2
        in_band = mag[(freqs >= 0.05) & (freqs <= 0.2)]
        stop = mag[freqs > 0.25]
        assert in_band.mean() > 5 * stop.mean()

    def test_dc_attenuated(self):
        sk = SincKernel(np.array([[0.05]]), np.array([[0.15]]), kernel_length=251)
        v = sinc_kernel_materialize(sk)[0, 0]
        mag = np.abs(np.fft.rfft(v, n=4096))
        freqs = np.fft.rfftfreq(4096)
        in_band_peak = mag[(freqs >= 0.05) & (freqs <= 0.15)].max()
        assert mag[0] < 0.1 * in_band_peak

    def test_paper_sign_is_pure_negation(self):
        sk = SincKernel(np.array([[0.04]]), np.array([[0.18]]), kernel_length=101)
        v = sinc_kernel_materialize(sk)
        sk.paper_sign = True
        v_neg = sinc_kernel_materialize(sk)
        np.testing.assert_allclose(v_neg, -v, atol=0)

    def test_ordering_violation_raises(self):
        sk = SincKernel(np.array([[0.3]]), np.array([[0.1]]), kernel_length=31)
        with pytest.raises(ValueError):
            sinc_kernel_materialize(sk)

    def test_even_length_rejected(self):
        with pytest.raises(ValueError):
            SincKernel(np.array([[0.1]]), np.array([[0.2]]), kernel_length=100)


class TestSincConvLayer:
    def test_trainable_parameter_economy(self):
        layer = SincConvLayer(2, 30, 251)
        count = sum(p.size for p in layer.parameters())
        assert count == 2 * 30 * 2
        free = ConvLayer(2, 30, 251, rng=np.random.default_rng(0))
        free_count = sum(p.size for p in free.parameters())
        assert free_count == 251 * 30 * 2 + 30

    def test_mel_init_monotone_peaks(self):
        layer = SincConvLayer(2, 8, 101)
        sk = layer.cutoffs()
        centers = ((sk.f_low + sk.f_high) / 2).reshape(-1)
        assert np.all(np.diff(centers) >= -1e-12)

    def test_mel_init_covers_range(self):
        f_low, f_high = mel_initial_cutoffs(60)
        assert f_low[0] * SAMPLE_RATE == pytest.approx(50.0)
        assert f_high[-1] * SAMPLE_RATE == pytest.approx(7900.0)

    def test_cutoff_gradients_via_materialization(self):
        # finite differences on (f_low, f_high) against the closed-form
        # cosine derivatives
        from wmse.layers import sinc_kernel_cutoff_grads

        sk = SincKernel(np.array([[0.07]]), np.array([[0.23]]), kernel_length=51)
        dv_dlow, dv_dhigh = sinc_kernel_cutoff_grads(sk)
        h = 1e-6
        for target, analytic in (("f_low", dv_dlow), ("f_high", dv_dhigh)):
            arr = getattr(sk, target)
            arr[0, 0] += h
            up = sinc_kernel_materialize(sk)
            arr[0, 0] -= 2 * h
            down = sinc_kernel_materialize(sk)
            arr[0, 0] += h
            numeric = (up - down) / (2 * h)
            np.testing.assert_allclose(analytic, numeric, atol=1e-6)

    def test_layer_gradients_through_reparam(self):
        rng = np.random.Generator(np.random.Philox(key=5))
        layer = SincConvLayer(1, 3, 31)
        x = rng.uniform(-1, 1, size=(1, 128))
        report = grad_check(layer, x, tolerance=1e-3)
        assert report.passed, report.worst()

    def test_forward_length_preserved(self):
        layer = SincConvLayer(2, 4, 51)
        y = layer.forward(np.zeros((2, 333)))
        assert y.shape == (4, 333)


class TestBlockBuilders:
    def test_default_dilated_block_shape(self):
        spec = DilatedBlockSpec()
        assert spec.receptive_field() == 54
        block = build_dilated_block(spec, rng=np.random.default_rng(0))
        convs = [l for l in block.layers if isinstance(l, ConvLayer)]
        assert len(convs) == 4

    def test_fig2_block(self):
        spec = DilatedBlockSpec(kernel_sizes=[2, 3, 3], dilations=[1, 2, 6])
        assert spec.receptive_field() == 18

    def test_expansion_scheme_enforced(self):
        with pytest.raises(ValueError):
            DilatedBlockSpec(kernel_sizes=[2, 3], dilations=[1, 3])

    def test_zero_input_zero_output(self):
        block = build_dilated_block(DilatedBlockSpec(channels=4),
                                    rng=np.random.default_rng(1))
        out = block.forward(np.zeros((4, 64)))
        assert np.max(np.abs(out)) == 0.0

    def test_conv_block_shapes(self):
        block = build_conv_block(55, 64, in_channels=2, rng=np.random.default_rng(2))
        conv = block.layers[0]
        assert conv.kernels.value.shape == (64, 2, 55)
        out = block.forward(np.random.default_rng(0).normal(size=(2, 200)))
        assert out.shape == (64, 200)

    def test_conv_block_param_count_k1(self):
        block = build_conv_block(1, 1, in_channels=3, rng=np.random.default_rng(3))
        conv = block.layers[0]
        assert conv.kernels.size + conv.bias.size == 1 * 3 * 1 + 1
