"""Minimal differentiable 1-D tensor engine.

Everything runs on float64 numpy arrays shaped (channels, length).  Each
layer implements an explicit forward/backward pair; there is no taped
autograd.  Convolutions are lowered to BLAS matmuls, either by looping
over kernel taps (cheap for small kernels) or by a chunked im2col
gather (large kernels), so a single core gets close to peak GEMM
throughput.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Parameter",
    "Tensor1D",
    "ConvLayerParams",
    "BatchNormParams",
    "AdamState",
    "Module",
    "Sequential",
    "ConvLayer",
    "BatchNorm",
    "LeakyReLU",
    "Tanh",
    "Dense",
    "conv1d_forward",
    "conv1d_backward",
    "batchnorm_apply",
    "leaky_relu",
    "mse_loss",
    "mse_loss_grad",
    "adam_step",
    "Adam",
    "grad_check",
    "GradCheckReport",
]

# im2col chunk budget in float64 elements (~4 MB sweeps best here).
_COL_CHUNK_ELEMS = 524_288
# single-output-channel convs go through FFT correlation above this size
_FFT_MIN_KERNEL = 32


class Parameter:
    """A trainable array with an accumulating gradient buffer."""

    def __init__(self, value: np.ndarray, name: str = ""):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)
        self.name = name

    @property
    def size(self) -> int:
        return self.value.size

    def zero_grad(self):
        self.grad.fill(0.0)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.value.shape})"


@dataclass
class Tensor1D:
    """A (channels, length) activation buffer with an optional gradient."""

    values: np.ndarray
    grad: np.ndarray | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim == 1:
            self.values = self.values[None, :]
        if self.values.ndim != 2:
            raise ValueError(f"Tensor1D needs a (channels, length) array, got shape {self.values.shape}")
        if self.grad is not None and np.shape(self.grad) != self.values.shape:
            raise ValueError("grad shape must match values shape")

    @property
    def channels(self) -> int:
        return self.values.shape[0]

    @property
    def length(self) -> int:
        return self.values.shape[1]

    def require_finite(self):
        if not np.all(np.isfinite(self.values)):
            raise FloatingPointError("Tensor1D holds non-finite values")
        return self


@dataclass
class ConvLayerParams:
    """Free-form convolution weights: kernels (out, in, k) plus bias (out,)."""

    kernels: np.ndarray
    bias: np.ndarray
    dilation: int = 1
    kernel_grad: np.ndarray = field(default=None, repr=False)
    bias_grad: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.kernels = np.asarray(self.kernels, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.kernels.ndim != 3:
            raise ValueError("kernels must be (out_channels, in_channels, kernel_size)")
        if self.bias.shape != (self.kernels.shape[0],):
            raise ValueError("bias must have one entry per output channel")
        if self.kernels.shape[2] < 1 or self.dilation < 1:
            raise ValueError("kernel_size and dilation must be >= 1")
        if self.kernel_grad is None:
            self.kernel_grad = np.zeros_like(self.kernels)
        if self.bias_grad is None:
            self.bias_grad = np.zeros_like(self.bias)

    @property
    def out_channels(self) -> int:
        return self.kernels.shape[0]

    @property
    def in_channels(self) -> int:
        return self.kernels.shape[1]

    @property
    def kernel_size(self) -> int:
        return self.kernels.shape[2]

    def parameter_count(self) -> int:
        return self.kernels.size + self.bias.size


@dataclass
class BatchNormParams:
    """Per-channel affine normalization state."""

    scale: np.ndarray
    shift: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    epsilon: float = 1e-5
    momentum: float = 0.9
    mode: str = "training"

    def __post_init__(self):
        for name in ("scale", "shift", "running_mean", "running_var"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if not 0.0 < self.momentum < 1.0:
            raise ValueError("momentum must be in (0, 1)")
        if np.any(self.running_var < 0):
            raise ValueError("running_var entries must be >= 0")

    @property
    def channels(self) -> int:
        return self.scale.shape[0]


# ---------------------------------------------------------------------------
# convolution core
# ---------------------------------------------------------------------------


def _same_padding(kernel_size: int, dilation: int) -> tuple[int, int]:
    total = dilation * (kernel_size - 1)
    return (total + 1) // 2, total // 2


def _pad_input(x: np.ndarray, pad_left: int, pad_right: int) -> np.ndarray:
    if pad_left == 0 and pad_right == 0:
        return x
    channels, length = x.shape
    xp = np.zeros((channels, length + pad_left + pad_right), dtype=np.float64)
    xp[:, pad_left:pad_left + length] = x
    return xp


def _im2col_chunk(xp: np.ndarray, k: int, dilation: int, t0: int, t1: int,
                  buf: np.ndarray | None = None) -> np.ndarray:
    """Gather (in*k, t1-t0) columns of dilated taps starting at output index t0."""
    channels = xp.shape[0]
    width = t1 - t0
    s0, s1 = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp[:, t0:],
        shape=(channels, k, width),
        strides=(s0, dilation * s1, s1),
    )
    if buf is None:
        return view.reshape(channels * k, width)
    target = buf[:, :width]
    np.copyto(target.reshape(channels, k, width), view)
    return target


def _fft_corr_rows(rows: np.ndarray, probe: np.ndarray, lags: np.ndarray) -> np.ndarray:
    """corr[c, j] = sum_t rows[c, lags[j] + t] * probe[t] via one FFT batch."""
    from scipy.fft import irfft, next_fast_len, rfft

    n = next_fast_len(rows.shape[1])
    spec = rfft(rows, n=n, axis=1)
    spec *= np.conj(rfft(probe, n=n))
    full = irfft(spec, n=n, axis=1)
    return full[:, lags]


def _corr_gemm(xp: np.ndarray, kernels: np.ndarray, out_len: int, dilation: int,
               out: np.ndarray | None = None) -> np.ndarray:
    """y[o,t] = sum_c sum_k kernels[o,c,k] * xp[c, t + k*dilation].

    Chunked im2col keeps the gather in cache and turns every kernel
    shape into the (out, in*k) @ (in*k, chunk) GEMM orientation, which
    is the one OpenBLAS runs near peak.
    """
    out_ch, in_ch, k = kernels.shape
    w2 = kernels.reshape(out_ch, in_ch * k)
    if out is None:
        out = np.empty((out_ch, out_len), dtype=np.float64)
    if k == 1 and dilation == 1:
        np.matmul(w2, xp[:, :out_len], out=out)
        return out
    if out_ch == 1 and k >= _FFT_MIN_KERNEL:
        # single output channel is GEMV-bandwidth-bound; FFT correlation
        # against the dilation-expanded kernel is much cheaper
        from scipy.fft import irfft, next_fast_len, rfft

        span = dilation * (k - 1) + 1
        dilated = np.zeros((in_ch, span))
        dilated[:, ::dilation] = kernels[0]
        n = next_fast_len(xp.shape[1])
        spec = rfft(xp, n=n, axis=1)
        spec *= np.conj(rfft(dilated, n=n, axis=1))
        out[0, :] = irfft(spec.sum(axis=0), n=n)[:out_len]
        return out
    chunk = max(64, _COL_CHUNK_ELEMS // (in_ch * k))
    for t0 in range(0, out_len, chunk):
        t1 = min(t0 + chunk, out_len)
        cols = _im2col_chunk(xp, k, dilation, t0, t1)
        np.matmul(w2, cols, out=out[:, t0:t1])
    return out


def conv1d_raw(x: np.ndarray, kernels: np.ndarray, bias: np.ndarray,
               dilation: int = 1, padding: str = "same"):
    """Dilated cross-correlation on a (C, L) array.

    Returns (output, padded_input); the padded input is what backward
    needs, so callers that train should keep it.
    """
    out_ch, in_ch, k = kernels.shape
    if x.shape[0] != in_ch:
        raise ValueError(f"input has {x.shape[0]} channels, kernels expect {in_ch}")
    length = x.shape[1]
    if padding == "same":
        if length < 1:
            raise ValueError("same padding needs at least one input sample")
        pad_left, pad_right = _same_padding(k, dilation)
        out_len = length
    elif padding == "valid":
        pad_left = pad_right = 0
        out_len = length - dilation * (k - 1)
        if out_len < 1:
            raise ValueError("input too short for valid-mode convolution")
    else:
        raise ValueError(f"unknown padding {padding!r}")

    xp = _pad_input(x, pad_left, pad_right)
    y = _corr_gemm(xp, kernels, out_len, dilation)
    y += bias[:, None]
    return y, xp


def conv1d_input_param_grads(xp: np.ndarray, kernels: np.ndarray, upstream: np.ndarray,
                             dilation: int, pad_left: int, input_length: int,
                             need_input_grad: bool = True):
    """Gradients of conv1d_raw w.r.t. input, kernels and bias.

    The input gradient is itself a correlation (upstream against the
    transposed, tap-reversed kernels), so it reuses the fast GEMM core.
    """
    out_ch, in_ch, k = kernels.shape
    out_len = upstream.shape[1]
    d_bias = upstream.sum(axis=1)

    d_kernels = np.zeros_like(kernels)
    if out_ch == 1 and k >= _FFT_MIN_KERNEL:
        lags = dilation * np.arange(k)
        d_kernels[0] = _fft_corr_rows(xp, upstream[0], lags)
    else:
        dw2 = d_kernels.reshape(out_ch, in_ch * k)
        chunk = max(64, _COL_CHUNK_ELEMS // (in_ch * k))
        for t0 in range(0, out_len, chunk):
            t1 = min(t0 + chunk, out_len)
            cols = _im2col_chunk(xp, k, dilation, t0, t1)
            dw2 += upstream[:, t0:t1] @ cols.T

    dx = None
    if need_input_grad:
        halo = dilation * (k - 1)
        gp = _pad_input(upstream, halo, halo)
        kt = np.ascontiguousarray(kernels[:, :, ::-1].transpose(1, 0, 2))
        dxp = _corr_gemm(gp, kt, xp.shape[1], dilation)
        dx = dxp[:, pad_left:pad_left + input_length]
        if not dx.flags.owndata:
            dx = dx.copy()
    return dx, d_kernels, d_bias


def conv1d_forward(input: Tensor1D, params: ConvLayerParams, padding: str = "same") -> Tensor1D:
    """Spec-surface convolution: Tensor1D in, Tensor1D out, validated."""
    y, _ = conv1d_raw(input.values, params.kernels, params.bias, params.dilation, padding)
    return Tensor1D(y).require_finite()


def conv1d_backward(input: Tensor1D, params: ConvLayerParams, upstream_grad: Tensor1D,
                    padding: str = "same"):
    """Exact analytic gradients of conv1d_forward; accumulates into params."""
    y, xp = conv1d_raw(input.values, params.kernels, params.bias, params.dilation, padding)
    if upstream_grad.values.shape != y.shape:
        raise ValueError("upstream gradient shape does not match the forward output")
    pad_left = _same_padding(params.kernel_size, params.dilation)[0] if padding == "same" else 0
    dx, dk, db = conv1d_input_param_grads(
        xp, params.kernels, upstream_grad.values, params.dilation, pad_left, input.length)
    params.kernel_grad += dk
    params.bias_grad += db
    return Tensor1D(dx).require_finite(), (dk, db)


# ---------------------------------------------------------------------------
# normalization, activations, loss
# ---------------------------------------------------------------------------


def batchnorm_apply(input: Tensor1D, params: BatchNormParams) -> Tensor1D:
    """Per-channel standardization over the time axis (training mode) or
    via running statistics (inference mode), then scale/shift."""
    x = input.values
    if input.channels != params.channels:
        raise ValueError("channel count mismatch between input and batchnorm params")
    if params.mode == "training":
        if input.length < 2:
            raise ValueError("training-mode batchnorm needs length >= 2")
        mean = x.mean(axis=1)
        var = x.var(axis=1)
        params.running_mean *= params.momentum
        params.running_mean += (1.0 - params.momentum) * mean
        params.running_var *= params.momentum
        params.running_var += (1.0 - params.momentum) * var
    else:
        mean = params.running_mean
        var = params.running_var
    inv_std = 1.0 / np.sqrt(var + params.epsilon)
    xhat = (x - mean[:, None]) * inv_std[:, None]
    y = params.scale[:, None] * xhat + params.shift[:, None]
    return Tensor1D(y).require_finite()


def leaky_relu(x: np.ndarray, alpha: float = 0.3) -> np.ndarray:
    return np.where(x >= 0.0, x, alpha * x)


def mse_loss(prediction: np.ndarray, target: np.ndarray) -> float:
    """Mean of squared differences over all entries."""
    prediction = np.asarray(prediction, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if prediction.shape != target.shape:
        raise ValueError(f"shape mismatch: {prediction.shape} vs {target.shape}")
    diff = prediction - target
    return float(np.mean(diff * diff))


def mse_loss_grad(prediction: np.ndarray, target: np.ndarray) -> np.ndarray:
    """d mse / d prediction = 2 (prediction - target) / count."""
    prediction = np.asarray(prediction, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if prediction.shape != target.shape:
        raise ValueError(f"shape mismatch: {prediction.shape} vs {target.shape}")
    return (2.0 / prediction.size) * (prediction - target)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    """Bias-corrected moment estimates for one parameter array."""

    first_moment: np.ndarray
    second_moment: np.ndarray
    step: int = 0
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps_hat: float = 1e-8

    @classmethod
    def for_shape(cls, shape, learning_rate: float = 0.001, **kw) -> "AdamState":
        return cls(first_moment=np.zeros(shape), second_moment=np.zeros(shape),
                   learning_rate=learning_rate, **kw)


def adam_step(value: np.ndarray, grad: np.ndarray, state: AdamState) -> np.ndarray:
    """One in-place Adam update; returns the updated value array."""
    if not np.all(np.isfinite(grad)):
        raise FloatingPointError("non-finite gradient passed to adam_step")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    state.first_moment *= b1
    state.first_moment += (1.0 - b1) * grad
    state.second_moment *= b2
    state.second_moment += (1.0 - b2) * (grad * grad)
    m_hat = state.first_moment / (1.0 - b1 ** state.step)
    v_hat = state.second_moment / (1.0 - b2 ** state.step)
    value -= state.learning_rate * m_hat / (np.sqrt(v_hat) + state.eps_hat)
    return value


class Adam:
    """Adam over a parameter list, one moment state per array."""

    def __init__(self, parameters, learning_rate: float = 0.001,
                 beta1: float = 0.9, beta2: float = 0.999, eps_hat: float = 1e-8):
        self.parameters = list(parameters)
        self.states = [
            AdamState.for_shape(p.value.shape, learning_rate=learning_rate,
                                beta1=beta1, beta2=beta2, eps_hat=eps_hat)
            for p in self.parameters
        ]

    def step(self):
        for p, s in zip(self.parameters, self.states):
            adam_step(p.value, p.grad, s)

    def zero_grad(self):
        for p in self.parameters:
            p.zero_grad()


def clip_grad_norm(parameters, max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most max_norm."""
    total = 0.0
    for p in parameters:
        total += float(np.sum(p.grad * p.grad))
    norm = math.sqrt(total)
    if norm > max_norm:
        factor = max_norm / (norm + 1e-12)
        for p in parameters:
            p.grad *= factor
    return norm


# ---------------------------------------------------------------------------
# layer modules
# ---------------------------------------------------------------------------


class Module:
    """Forward/backward pair with explicit caches; no autograd tape."""

    training = True

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def iter_modules(self):
        yield self

    def parameters(self) -> list[Parameter]:
        return []

    def state_arrays(self):
        """(name, array) pairs that fully determine inference behavior."""
        return [(p.name, p.value) for p in self.parameters()]

    def set_training(self, flag: bool):
        self.training = flag

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def __call__(self, x):
        return self.forward(x)


class Sequential(Module):
    def __init__(self, layers):
        self.layers = list(layers)

    def forward(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, grad):
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad

    def iter_modules(self):
        yield self
        for layer in self.layers:
            yield from layer.iter_modules()

    def parameters(self):
        return [p for layer in self.layers for p in layer.parameters()]

    def state_arrays(self):
        return [pair for layer in self.layers for pair in layer.state_arrays()]

    def set_training(self, flag):
        self.training = flag
        for layer in self.layers:
            layer.set_training(flag)


class ConvLayer(Module):
    """Same-padded dilated convolution with bias."""

    def __init__(self, in_channels, out_channels, kernel_size, dilation=1,
                 rng=None, name="conv", padding="same"):
        self.dilation = dilation
        self.padding = padding
        fan_in = in_channels * kernel_size
        bound = 1.0 / math.sqrt(fan_in)
        if rng is None:
            kernels = np.zeros((out_channels, in_channels, kernel_size))
        else:
            kernels = rng.uniform(-bound, bound, size=(out_channels, in_channels, kernel_size))
        self.kernels = Parameter(kernels, f"{name}.kernels")
        self.bias = Parameter(np.zeros(out_channels), f"{name}.bias")
        self.need_input_grad = True
        self._xp = None
        self._in_len = 0

    def forward(self, x):
        y, xp = conv1d_raw(x, self.kernels.value, self.bias.value, self.dilation, self.padding)
        self._xp = xp
        self._in_len = x.shape[1]
        return y

    def backward(self, grad):
        k = self.kernels.value.shape[2]
        pad_left = _same_padding(k, self.dilation)[0] if self.padding == "same" else 0
        dx, dk, db = conv1d_input_param_grads(
            self._xp, self.kernels.value, grad, self.dilation, pad_left, self._in_len,
            need_input_grad=self.need_input_grad)
        self.kernels.grad += dk
        self.bias.grad += db
        return dx

    def parameters(self):
        return [self.kernels, self.bias]


class BatchNorm(Module):
    """Per-channel batch normalization over the time axis of one segment."""

    def __init__(self, channels, epsilon=1e-5, momentum=0.9, name="bn"):
        self.scale = Parameter(np.ones(channels), f"{name}.scale")
        self.shift = Parameter(np.zeros(channels), f"{name}.shift")
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.epsilon = epsilon
        self.momentum = momentum
        self.update_running = True
        self._xhat = None
        self._inv_std = None
        self._name = name

    def forward(self, x):
        if self.training:
            if x.shape[1] < 2:
                raise ValueError("training-mode batchnorm needs length >= 2")
            mean = x.mean(axis=1)
            var = x.var(axis=1)
            if self.update_running:
                self.running_mean *= self.momentum
                self.running_mean += (1.0 - self.momentum) * mean
                self.running_var *= self.momentum
                self.running_var += (1.0 - self.momentum) * var
        else:
            mean = self.running_mean
            var = self.running_var
        inv_std = 1.0 / np.sqrt(var + self.epsilon)
        xhat = (x - mean[:, None]) * inv_std[:, None]
        self._xhat = xhat
        self._inv_std = inv_std
        self._trained_forward = self.training
        return self.scale.value[:, None] * xhat + self.shift.value[:, None]

    def backward(self, grad):
        self.shift.grad += grad.sum(axis=1)
        xhat = self._xhat
        self.scale.grad += (grad * xhat).sum(axis=1)
        if self._trained_forward:
            g = grad * self.scale.value[:, None]
            mean_g = g.mean(axis=1, keepdims=True)
            mean_gx = (g * xhat).mean(axis=1, keepdims=True)
            return self._inv_std[:, None] * (g - mean_g - xhat * mean_gx)
        # inference mode: running stats are constants
        return grad * (self.scale.value * self._inv_std)[:, None]

    def parameters(self):
        return [self.scale, self.shift]

    def state_arrays(self):
        return [
            (self.scale.name, self.scale.value),
            (self.shift.name, self.shift.value),
            (f"{self._name}.running_mean", self.running_mean),
            (f"{self._name}.running_var", self.running_var),
        ]


class LeakyReLU(Module):
    # freeze_mask pins the sign mask at its last value; the gradient
    # checker uses it so finite differences probe the same piecewise
    # branch the backward pass differentiates
    def __init__(self, alpha=0.3):
        self.alpha = alpha
        self.freeze_mask = False
        self._mask = None

    def forward(self, x):
        if not self.freeze_mask:
            self._mask = x >= 0.0
        return np.where(self._mask, x, self.alpha * x)

    def backward(self, grad):
        return np.where(self._mask, grad, self.alpha * grad)


class Tanh(Module):
    def __init__(self):
        self._y = None

    def forward(self, x):
        self._y = np.tanh(x)
        return self._y

    def backward(self, grad):
        return grad * (1.0 - self._y * self._y)


class Dense(Module):
    """Affine layer on (batch, features) matrices."""

    def __init__(self, in_features, out_features, rng=None, name="dense"):
        bound = 1.0 / math.sqrt(in_features)
        if rng is None:
            w = np.zeros((in_features, out_features))
        else:
            w = rng.uniform(-bound, bound, size=(in_features, out_features))
        self.weight = Parameter(w, f"{name}.weight")
        self.bias = Parameter(np.zeros(out_features), f"{name}.bias")
        self._x = None

    def forward(self, x):
        self._x = x
        return x @ self.weight.value + self.bias.value

    def backward(self, grad):
        self.weight.grad += self._x.T @ grad
        self.bias.grad += grad.sum(axis=0)
        return grad @ self.weight.value.T

    def parameters(self):
        return [self.weight, self.bias]


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


@dataclass
class GradCheckEntry:
    target: str
    max_rel_error: float
    checked: int


@dataclass
class GradCheckReport:
    entries: list[GradCheckEntry]
    tolerance: float

    @property
    def max_rel_error(self) -> float:
        return max((e.max_rel_error for e in self.entries), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance

    def worst(self) -> GradCheckEntry | None:
        return max(self.entries, key=lambda e: e.max_rel_error, default=None)


def _rel_err(a: float, n: float) -> float:
    denom = max(abs(a), abs(n), 1e-6)
    return abs(a - n) / denom


def grad_check(fragment, input: np.ndarray, tolerance: float = 1e-4,
               step: float = 1e-4, max_coords: int = 24, seed: int = 0,
               step_overrides: dict | None = None) -> GradCheckReport:
    """Compare analytic gradients of `fragment` against central finite
    differences of the scalar probe J = sum(forward(x) * R).

    Checks the input gradient and every parameter gradient on a seeded
    random subset of coordinates.  The fragment must expose forward /
    backward / parameters; batchnorm running statistics are snapshotted
    and restored so the check leaves no side effects.

    Piecewise-linear activations freeze their sign masks at the base
    point for the difference evaluations: a perturbation that crosses a
    kink would otherwise measure the average of the two slopes, which
    no subgradient convention can match.
    """
    rng = np.random.Generator(np.random.Philox(key=seed))
    x = np.asarray(input, dtype=np.float64)

    running = [(arr, arr.copy()) for name, arr in fragment.state_arrays()
               if "running" in name]
    maskable = [m for m in getattr(fragment, "iter_modules", lambda: [fragment])()
                if hasattr(m, "freeze_mask")]

    def scalar(xv):
        return float(np.sum(fragment.forward(xv) * probe))

    y0 = fragment.forward(x)
    probe = rng.standard_normal(y0.shape)

    fragment.zero_grad()
    fragment.forward(x)
    dx = fragment.backward(probe.copy())
    for m in maskable:
        m.freeze_mask = True

    entries = []

    def check_array(label, value, analytic):
        h = step
        for pattern, override in (step_overrides or {}).items():
            if pattern in label:
                h = override
        flat_v = value.reshape(-1)
        flat_a = analytic.reshape(-1)
        n = flat_v.size
        idx = np.arange(n) if n <= max_coords else rng.choice(n, size=max_coords, replace=False)
        worst = 0.0
        for i in idx:
            keep = flat_v[i]
            flat_v[i] = keep + h
            up = scalar(x)
            flat_v[i] = keep - h
            down = scalar(x)
            flat_v[i] = keep
            numeric = (up - down) / (2.0 * h)
            worst = max(worst, _rel_err(flat_a[i], numeric))
        entries.append(GradCheckEntry(label, worst, len(idx)))

    if dx is not None:
        check_array("input", x, dx)
    for p in fragment.parameters():
        check_array(p.name or "param", p.value, p.grad)

    for m in maskable:
        m.freeze_mask = False
    for arr, saved in running:
        arr[...] = saved

    return GradCheckReport(entries=entries, tolerance=tolerance)
