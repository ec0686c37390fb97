"""Objective metrics and learned-filter analysis.

The intelligibility metric follows the published short-time band
correlation algorithm: 10 kHz internal rate, 256-sample frames with 50%
overlap, 15 one-third-octave bands starting at 150 Hz, 30-frame
analysis windows, and -15 dB clipping, with silent frames removed
against a 40 dB dynamic range.  The final score is clamped into [0, 1].
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import resample_poly

from .layers import SincConvLayer
from .numerics import ConvLayer, mse_loss
from .pngout import array_to_gray, write_png_gray

__all__ = [
    "StoiConfig",
    "stoi",
    "mse_metric",
    "MetricsReport",
    "analyze_filters",
    "first_layer_features",
    "passband_coverage",
]

SAMPLE_RATE = 16000


@dataclass
class StoiConfig:
    internal_rate: int = 10000
    frame_length: int = 256
    hop: int = 128
    fft_size: int = 512
    n_bands: int = 15
    first_center_hz: float = 150.0
    analysis_frames: int = 30
    beta_db: float = -15.0
    dynamic_range_db: float = 40.0

    def band_edges(self):
        centers = self.first_center_hz * 2.0 ** (np.arange(self.n_bands) / 3.0)
        lo = centers * 2.0 ** (-1.0 / 6.0)
        hi = centers * 2.0 ** (1.0 / 6.0)
        if hi[-1] >= self.internal_rate / 2:
            raise ValueError("one-third-octave bands exceed the internal Nyquist")
        return lo, hi

    def band_matrix(self) -> np.ndarray:
        """(n_bands, bins) 0/1 matrix over the zero-padded FFT bins."""
        freqs = np.linspace(0, self.internal_rate / 2, self.fft_size // 2 + 1)
        lo, hi = self.band_edges()
        obm = np.zeros((self.n_bands, freqs.size))
        for j in range(self.n_bands):
            il = int(np.argmin(np.abs(freqs - lo[j])))
            ir = int(np.argmin(np.abs(freqs - hi[j])))
            obm[j, il:ir] = 1.0
        return obm


_DEFAULT_STOI = StoiConfig()
_EPS = np.finfo(np.float64).eps


def _frame(x: np.ndarray, frame_length: int, hop: int) -> np.ndarray:
    n = 1 + (x.size - frame_length) // hop
    idx = np.arange(frame_length)[None, :] + hop * np.arange(n)[:, None]
    return x[idx]


def _hanning(n: int) -> np.ndarray:
    # symmetric window without zero endpoints
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(1, n + 1) / (n + 1))


def _remove_silent_frames(x, y, cfg: StoiConfig):
    win = _hanning(cfg.frame_length)
    xf = _frame(x, cfg.frame_length, cfg.hop) * win
    yf = _frame(y, cfg.frame_length, cfg.hop) * win
    energy_db = 20.0 * np.log10(np.linalg.norm(xf, axis=1) + _EPS)
    keep = energy_db > energy_db.max() - cfg.dynamic_range_db
    xf, yf = xf[keep], yf[keep]
    n_out = xf.shape[0]
    length = (n_out - 1) * cfg.hop + cfg.frame_length if n_out else 0
    xs = np.zeros(length)
    ys = np.zeros(length)
    for i in range(n_out):
        sl = slice(i * cfg.hop, i * cfg.hop + cfg.frame_length)
        xs[sl] += xf[i]
        ys[sl] += yf[i]
    return xs, ys


def _band_envelopes(x: np.ndarray, cfg: StoiConfig, obm: np.ndarray) -> np.ndarray:
    win = _hanning(cfg.frame_length)
    frames = _frame(x, cfg.frame_length, cfg.hop) * win
    spec = np.fft.rfft(frames, n=cfg.fft_size, axis=1)
    power = (spec.real ** 2 + spec.imag ** 2).T   # (bins, frames)
    return np.sqrt(obm @ power)                    # (bands, frames)


def stoi(reference, degraded, config: StoiConfig | None = None) -> float:
    """Short-time band-correlation intelligibility score in [0, 1]."""
    cfg = config or _DEFAULT_STOI
    x = reference.samples if hasattr(reference, "samples") else np.asarray(reference, dtype=np.float64)
    y = degraded.samples if hasattr(degraded, "samples") else np.asarray(degraded, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError("reference and degraded must have equal length")
    if not np.any(x):
        raise ValueError("reference has zero energy")

    x = resample_poly(x, cfg.internal_rate, SAMPLE_RATE)
    y = resample_poly(y, cfg.internal_rate, SAMPLE_RATE)
    x, y = _remove_silent_frames(x, y, cfg)

    min_length = cfg.frame_length + cfg.hop * (cfg.analysis_frames - 1)
    if x.size < min_length:
        raise ValueError("too few voiced frames for one analysis window")

    obm = cfg.band_matrix()
    xb = _band_envelopes(x, cfg, obm)
    yb = _band_envelopes(y, cfg, obm)

    n = cfg.analysis_frames
    clip_gain = 10.0 ** (-cfg.beta_db / 20.0)
    scores = []
    for m in range(n, xb.shape[1] + 1):
        xs = xb[:, m - n:m]
        ys = yb[:, m - n:m]
        alpha = np.linalg.norm(xs, axis=1, keepdims=True) / (
            np.linalg.norm(ys, axis=1, keepdims=True) + _EPS)
        ys_prime = np.minimum(alpha * ys, xs * (1.0 + clip_gain))
        xs_c = xs - xs.mean(axis=1, keepdims=True)
        ys_c = ys_prime - ys_prime.mean(axis=1, keepdims=True)
        denom = (np.linalg.norm(xs_c, axis=1) * np.linalg.norm(ys_c, axis=1)) + _EPS
        scores.append(np.sum(xs_c * ys_c, axis=1) / denom)
    return float(np.clip(np.mean(scores), 0.0, 1.0))


def mse_metric(reference, estimate) -> float:
    """Mean squared sample difference between peak-normalized waveforms."""
    x = reference.samples if hasattr(reference, "samples") else np.asarray(reference, dtype=np.float64)
    y = estimate.samples if hasattr(estimate, "samples") else np.asarray(estimate, dtype=np.float64)
    for name, arr in (("reference", x), ("estimate", y)):
        peak = np.max(np.abs(arr))
        if peak > 1.0 + 1e-9:
            raise ValueError(f"{name} is not peak-normalized (peak {peak:.3f})")
    return mse_loss(y, x)


@dataclass
class MetricsReport:
    model_id: str
    corpus_id: str
    seed: int
    utterance_ids: list = field(default_factory=list)
    stoi_scores: list = field(default_factory=list)
    mse_scores: list = field(default_factory=list)

    def add(self, uid, stoi_score, mse_score):
        if not 0.0 <= stoi_score <= 1.0:
            raise ValueError("stoi score outside [0, 1]")
        self.utterance_ids.append(uid)
        self.stoi_scores.append(float(stoi_score))
        self.mse_scores.append(float(mse_score))

    @property
    def mean_stoi(self) -> float:
        return float(np.mean(self.stoi_scores))

    @property
    def mean_mse(self) -> float:
        return float(np.mean(self.mse_scores))

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["utterance_id", "stoi", "mse"])
            for uid, s, m in zip(self.utterance_ids, self.stoi_scores, self.mse_scores):
                writer.writerow([uid, f"{s:.6f}", f"{m:.8f}"])
            writer.writerow(["mean", f"{self.mean_stoi:.6f}", f"{self.mean_mse:.8f}"])


# ---------------------------------------------------------------------------
# first-layer analysis
# ---------------------------------------------------------------------------


def _first_layer(model):
    first = model.front if getattr(model, "front", None) is not None else model.stages[0]
    while hasattr(first, "layers"):
        first = first.layers[0]
    if not isinstance(first, (ConvLayer, SincConvLayer)):
        raise ValueError("model's first layer is neither conv nor sinc")
    return first


def _first_layer_kernels(model):
    first = _first_layer(model)
    if isinstance(first, SincConvLayer):
        from .layers import sinc_kernel_materialize

        sk = first.cutoffs()
        return sinc_kernel_materialize(sk), sk
    return first.kernels.value, None


def analyze_filters(model, out_dir=None, n_fft: int = 4096):
    """Frequency responses of the first layer, one row per (out, in)
    kernel slice: peak frequency, -3 dB bandwidth, and for sinc layers
    the learned cutoffs.  Optionally exports CSV + PNG heat map."""
    kernels, sk = _first_layer_kernels(model)
    out_ch, in_ch, _ = kernels.shape
    freqs = np.fft.rfftfreq(n_fft) * SAMPLE_RATE
    rows = []
    mags = []
    for o in range(out_ch):
        for c in range(in_ch):
            mag = np.abs(np.fft.rfft(kernels[o, c], n=n_fft))
            mags.append(mag)
            peak_idx = int(np.argmax(mag))
            peak = mag[peak_idx]
            row = {"filter_id": o * in_ch + c,
                   "f_peak_hz": float(freqs[peak_idx]),
                   "bw_hz": 0.0, "f_low_hz": "", "f_high_hz": ""}
            if peak > 0:
                above = np.flatnonzero(mag >= peak / np.sqrt(2.0))
                row["bw_hz"] = float(freqs[above[-1]] - freqs[above[0]])
            if sk is not None:
                row["f_low_hz"] = float(sk.f_low[o, c] * SAMPLE_RATE)
                row["f_high_hz"] = float(sk.f_high[o, c] * SAMPLE_RATE)
            rows.append(row)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / "filters.csv", "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
            writer.writeheader()
            writer.writerows(rows)
        write_png_gray(out_dir / "filters.png", array_to_gray(np.array(mags)))
    return rows


def first_layer_features(model, waveform, out_dir=None):
    """Per-filter activation magnitudes over time for one waveform.

    Returns an (out_channels, length) magnitude image; row count equals
    the layer's filter count.
    """
    first = _first_layer(model)
    x = waveform.samples if hasattr(waveform, "samples") else np.asarray(waveform, dtype=np.float64)
    in_ch = (first.in_channels if isinstance(first, SincConvLayer)
             else first.kernels.value.shape[1])
    segment = np.tile(np.atleast_2d(x), (in_ch, 1))
    image = np.abs(first.forward(segment))
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        np.savetxt(out_dir / "features.csv", image, delimiter=",", fmt="%.6e")
        write_png_gray(out_dir / "features.png", array_to_gray(image))
    return image


def passband_coverage(model, f_lo_hz: float = 50.0, f_hi_hz: float = 8000.0) -> float:
    """Fraction of [f_lo, f_hi] covered by the union of learned sinc bands."""
    first = _first_layer(model)
    if not isinstance(first, SincConvLayer):
        raise ValueError("passband coverage is defined for sinc first layers")
    sk = first.cutoffs()
    intervals = sorted(zip((sk.f_low * SAMPLE_RATE).ravel(),
                           (sk.f_high * SAMPLE_RATE).ravel()))
    covered = 0.0
    cursor = f_lo_hz
    for lo, hi in intervals:
        lo, hi = max(lo, cursor), min(hi, f_hi_hz)
        if hi > lo:
            covered += hi - lo
            cursor = hi
    return covered / (f_hi_hz - f_lo_hz)
