"""Model-specific layer constructors: the parametric sinc band-pass
convolution, dilated convolution blocks, plain convolution blocks, and
receptive-field arithmetic.

A sinc layer stores one learnable (low, high) cutoff pair per
(out_channel, in_channel) kernel slice -- two trainable reals where a
free-form kernel has `kernel_length` -- and materializes the actual
taps on every forward pass.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .numerics import (
    BatchNorm,
    ConvLayer,
    LeakyReLU,
    Module,
    Parameter,
    Sequential,
    _same_padding,
    conv1d_input_param_grads,
    conv1d_raw,
)

__all__ = [
    "SincKernel",
    "SincConvLayer",
    "DilatedBlockSpec",
    "sinc_kernel_materialize",
    "sinc_cutoff_reparam",
    "sinc_cutoff_reparam_grad",
    "receptive_field",
    "build_dilated_block",
    "build_conv_block",
    "mel_initial_cutoffs",
]

SAMPLE_RATE = 16000
# cutoff constraints in cycles/sample
F_MIN = 50.0 / SAMPLE_RATE
F_MIN_BANDWIDTH = 50.0 / SAMPLE_RATE
F_EDGE_MARGIN = 1e-3
LEAKY_ALPHA = 0.3


def receptive_field(kernel_sizes, dilations) -> int:
    """1 + sum(d_i * (k_i - 1)): input samples seen by one output sample."""
    kernel_sizes = list(kernel_sizes)
    dilations = list(dilations)
    if not kernel_sizes or len(kernel_sizes) != len(dilations):
        raise ValueError("kernel_sizes and dilations must be equal-length, non-empty")
    if any(k < 1 for k in kernel_sizes) or any(d < 1 for d in dilations):
        raise ValueError("kernel sizes and dilations must be >= 1")
    return 1 + sum(d * (k - 1) for k, d in zip(kernel_sizes, dilations))


@dataclass
class DilatedBlockSpec:
    """Sub-layer shapes of one dilated convolution block.

    Dilations follow the exponential-expansion scheme: dilations[i] is
    the product of kernel_sizes[0:i], which makes the block's receptive
    field equal the product of its kernel sizes.
    """

    kernel_sizes: list = field(default_factory=lambda: [2, 3, 3, 3])
    dilations: list = field(default_factory=lambda: [1, 2, 6, 18])
    channels: int = 30

    def __post_init__(self):
        if len(self.kernel_sizes) != len(self.dilations):
            raise ValueError("kernel_sizes and dilations must have equal length")
        expected = 1
        for k, d in zip(self.kernel_sizes, self.dilations):
            if d != expected:
                raise ValueError(
                    f"dilation {d} breaks the expansion scheme (expected {expected})")
            expected *= k

    def receptive_field(self) -> int:
        return receptive_field(self.kernel_sizes, self.dilations)


# ---------------------------------------------------------------------------
# sinc cutoff handling
# ---------------------------------------------------------------------------


def _fold(u, lo, hi):
    """Reflect u >= 0 into [lo, hi]; also returns the local slope sign."""
    span = hi - lo
    period = 2.0 * span
    r = np.mod(u, period)
    ascending = r <= span
    folded = np.where(ascending, r, period - r)
    return lo + folded, np.where(ascending, 1.0, -1.0)


def sinc_cutoff_reparam(raw_low, raw_bandwidth):
    """Map unconstrained reals to valid cutoffs 0 < f_low < f_high < 0.5.

    f_low folds |raw_low| into its admissible range; f_high adds a
    minimum bandwidth plus |raw_bandwidth| and clips at the Nyquist
    margin.  Continuous and differentiable almost everywhere.
    """
    raw_low = np.asarray(raw_low, dtype=np.float64)
    raw_bandwidth = np.asarray(raw_bandwidth, dtype=np.float64)
    low_max = 0.5 - F_EDGE_MARGIN - F_MIN_BANDWIDTH
    f_low, _ = _fold(np.abs(raw_low), F_MIN, low_max)
    f_high = np.minimum(f_low + F_MIN_BANDWIDTH + np.abs(raw_bandwidth), 0.5 - F_EDGE_MARGIN)
    return f_low, f_high


def sinc_cutoff_reparam_grad(raw_low, raw_bandwidth):
    """Jacobian entries of the reparameterization (subgradients at kinks).

    Returns (d f_low / d raw_low, d f_high / d raw_low, d f_high / d raw_bw).
    """
    raw_low = np.asarray(raw_low, dtype=np.float64)
    raw_bandwidth = np.asarray(raw_bandwidth, dtype=np.float64)
    low_max = 0.5 - F_EDGE_MARGIN - F_MIN_BANDWIDTH
    f_low, slope = _fold(np.abs(raw_low), F_MIN, low_max)
    dlow_draw = slope * np.sign(raw_low)
    unclipped = (f_low + F_MIN_BANDWIDTH + np.abs(raw_bandwidth)) < (0.5 - F_EDGE_MARGIN)
    dhigh_draw_low = np.where(unclipped, dlow_draw, 0.0)
    dhigh_draw_bw = np.where(unclipped, np.sign(raw_bandwidth), 0.0)
    return dlow_draw, dhigh_draw_low, dhigh_draw_bw


def mel_initial_cutoffs(n_slices: int, f_lo_hz: float = 50.0, f_hi_hz: float = 7900.0):
    """Cutoff pairs on a mel-spaced grid covering f_lo_hz .. f_hi_hz.

    Slice i gets the i-th pair of consecutive mel-grid edges, so peak
    frequencies are monotone nondecreasing across flattened slices.
    """
    def to_mel(f):
        return 2595.0 * np.log10(1.0 + f / 700.0)

    def from_mel(m):
        return 700.0 * (10.0 ** (m / 2595.0) - 1.0)

    edges = from_mel(np.linspace(to_mel(f_lo_hz), to_mel(f_hi_hz), n_slices + 1))
    f_low = edges[:-1] / SAMPLE_RATE
    f_high = edges[1:] / SAMPLE_RATE
    return f_low, f_high


# ---------------------------------------------------------------------------
# kernel materialization
# ---------------------------------------------------------------------------


@dataclass
class SincKernel:
    """Cutoff pairs (out, in) plus the shared odd kernel length."""

    f_low: np.ndarray
    f_high: np.ndarray
    kernel_length: int = 251
    paper_sign: bool = False

    def __post_init__(self):
        self.f_low = np.atleast_2d(np.asarray(self.f_low, dtype=np.float64))
        self.f_high = np.atleast_2d(np.asarray(self.f_high, dtype=np.float64))
        if self.f_low.shape != self.f_high.shape:
            raise ValueError("f_low / f_high shapes differ")
        if self.kernel_length % 2 == 0 or self.kernel_length < 1:
            raise ValueError("kernel_length must be odd and positive")

    def validate(self):
        ok = (self.f_low > 0) & (self.f_low < self.f_high) & (self.f_high < 0.5)
        if not np.all(ok):
            raise ValueError("cutoffs must satisfy 0 < f_low < f_high < 0.5")

    def trainable_parameter_count(self) -> int:
        return 2 * self.f_low.size


def _hamming_centered(length: int) -> np.ndarray:
    n = np.arange(length)
    return 0.54 - 0.46 * np.cos(2.0 * np.pi * n / (length - 1))


def sinc_kernel_materialize(sk: SincKernel) -> np.ndarray:
    """Band-pass taps v = s o w for every (out, in) slice.

    s_t = 2 f_high sinc(2 pi f_high t) - 2 f_low sinc(2 pi f_low t) on
    symmetric taps t, with s_0 = 2 (f_high - f_low), windowed by a full
    Hamming window whose peak sits at t = 0.  `paper_sign` negates the
    result (low-minus-high ordering of the two sinc terms).
    """
    sk.validate()
    L = sk.kernel_length
    t = np.arange(L, dtype=np.float64) - (L - 1) / 2.0
    fl = sk.f_low[..., None]
    fh = sk.f_high[..., None]
    # np.sinc(x) = sin(pi x)/(pi x), so 2 f sinc_u(2 pi f t) = 2 f np.sinc(2 f t)
    s = 2.0 * fh * np.sinc(2.0 * fh * t) - 2.0 * fl * np.sinc(2.0 * fl * t)
    if sk.paper_sign:
        s = -s
    return s * _hamming_centered(L)


def sinc_kernel_cutoff_grads(sk: SincKernel):
    """d v / d f_low and d v / d f_high, same shape as the kernels.

    With s_t = (sin(2 pi f_high t) - sin(2 pi f_low t)) / (pi t) the
    derivatives collapse to cosines: dv/df_high = 2 cos(2 pi f_high t) w_t.
    """
    L = sk.kernel_length
    t = np.arange(L, dtype=np.float64) - (L - 1) / 2.0
    w = _hamming_centered(L)
    dv_dhigh = 2.0 * np.cos(2.0 * np.pi * sk.f_high[..., None] * t) * w
    dv_dlow = -2.0 * np.cos(2.0 * np.pi * sk.f_low[..., None] * t) * w
    if sk.paper_sign:
        dv_dhigh, dv_dlow = -dv_dhigh, -dv_dlow
    return dv_dlow, dv_dhigh


class SincConvLayer(Module):
    """Convolution whose kernels are parametric band-pass filters.

    Trainable state is one unconstrained (raw_low, raw_bandwidth) pair
    per (out, in) slice; gradients flow through the materialization and
    the cutoff reparameterization only.  No bias.
    """

    def __init__(self, in_channels, out_channels, kernel_length=251,
                 paper_sign=False, name="sinc"):
        if kernel_length % 2 == 0:
            raise ValueError("sinc kernel length must be odd")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_length = kernel_length
        self.paper_sign = paper_sign
        f_low, f_high = mel_initial_cutoffs(out_channels * in_channels)
        # exact zeros sit on the |raw| kink where both the analytic and
        # central-difference derivatives vanish, so they stay checkable
        raw_low = np.maximum(f_low - F_MIN, 0.0).reshape(out_channels, in_channels)
        raw_bw = (f_high - f_low - F_MIN_BANDWIDTH).clip(min=1e-3)
        raw_bw = raw_bw.reshape(out_channels, in_channels)
        self.raw_low = Parameter(raw_low, f"{name}.raw_low")
        self.raw_bandwidth = Parameter(raw_bw, f"{name}.raw_bandwidth")
        self.need_input_grad = True
        self._zero_bias = np.zeros(out_channels)
        self._xp = None
        self._in_len = 0
        self._kernel = None

    def cutoffs(self) -> SincKernel:
        f_low, f_high = sinc_cutoff_reparam(self.raw_low.value, self.raw_bandwidth.value)
        return SincKernel(f_low, f_high, self.kernel_length, self.paper_sign)

    def forward(self, x):
        sk = self.cutoffs()
        self._kernel = sinc_kernel_materialize(sk)
        self._sk = sk
        y, xp = conv1d_raw(x, self._kernel, self._zero_bias, dilation=1, padding="same")
        self._xp = xp
        self._in_len = x.shape[1]
        return y

    def backward(self, grad):
        pad_left = _same_padding(self.kernel_length, 1)[0]
        dx, dk, _ = conv1d_input_param_grads(
            self._xp, self._kernel, grad, 1, pad_left, self._in_len,
            need_input_grad=self.need_input_grad)
        dv_dlow, dv_dhigh = sinc_kernel_cutoff_grads(self._sk)
        d_flow = np.sum(dk * dv_dlow, axis=2)
        d_fhigh = np.sum(dk * dv_dhigh, axis=2)
        dlow_draw, dhigh_draw_low, dhigh_draw_bw = sinc_cutoff_reparam_grad(
            self.raw_low.value, self.raw_bandwidth.value)
        self.raw_low.grad += d_flow * dlow_draw + d_fhigh * dhigh_draw_low
        self.raw_bandwidth.grad += d_fhigh * dhigh_draw_bw
        return dx

    def parameters(self):
        return [self.raw_low, self.raw_bandwidth]


# ---------------------------------------------------------------------------
# block constructors
# ---------------------------------------------------------------------------


def build_dilated_block(spec: DilatedBlockSpec, in_channels=None, rng=None,
                        name="dblock") -> Sequential:
    """conv(same) -> batchnorm -> LeakyReLU per sub-layer."""
    layers = []
    prev = spec.channels if in_channels is None else in_channels
    for i, (k, d) in enumerate(zip(spec.kernel_sizes, spec.dilations)):
        layers.append(ConvLayer(prev, spec.channels, k, dilation=d, rng=rng,
                                name=f"{name}.conv{i}"))
        layers.append(BatchNorm(spec.channels, name=f"{name}.bn{i}"))
        layers.append(LeakyReLU(LEAKY_ALPHA))
        prev = spec.channels
    return Sequential(layers)


def build_conv_block(kernel_size, channels, in_channels=None, rng=None,
                     name="block") -> Sequential:
    """conv(same) -> batchnorm -> LeakyReLU."""
    if kernel_size < 1:
        raise ValueError("kernel_size must be >= 1")
    prev = channels if in_channels is None else in_channels
    return Sequential([
        ConvLayer(prev, channels, kernel_size, rng=rng, name=f"{name}.conv"),
        BatchNorm(channels, name=f"{name}.bn"),
        LeakyReLU(LEAKY_ALPHA),
    ])
