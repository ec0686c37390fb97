"""STFT/ISTFT, log-power spectral features, and the spectral-mapping
dense-network baseline that reconstructs waveforms with the noisy
phase.

The analysis window is a periodic Hann at 50% overlap, which sums to
exactly one (constant overlap-add), so synthesis with a matching
window normalized by the squared-window overlap inverts the transform
to machine precision wherever at least one frame covers a sample.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .data import philox
from .numerics import (
    Adam,
    Dense,
    LeakyReLU,
    Module,
    Sequential,
    clip_grad_norm,
    mse_loss,
    mse_loss_grad,
)
from .pngout import array_to_gray, write_png_gray

__all__ = [
    "StftConfig",
    "stft",
    "istft",
    "lps",
    "lps_invert",
    "DdaeSpec",
    "DdaeNetwork",
    "assemble_context",
    "train_ddae",
    "ddae_enhance",
    "export_spectrogram",
]

LPS_EPSILON = 1e-10


@dataclass
class StftConfig:
    frame_length: int = 512
    hop: int = 256
    sample_rate: int = 16000

    @property
    def bins(self) -> int:
        return self.frame_length // 2 + 1

    def window(self) -> np.ndarray:
        n = np.arange(self.frame_length)
        return 0.5 - 0.5 * np.cos(2.0 * np.pi * n / self.frame_length)

    def cola_profile(self, n_frames: int) -> np.ndarray:
        """Overlap-added window sum; constant 1 on the interior."""
        length = (n_frames - 1) * self.hop + self.frame_length
        w = self.window()
        acc = np.zeros(length)
        for m in range(n_frames):
            acc[m * self.hop:m * self.hop + self.frame_length] += w
        return acc


_DEFAULT_STFT = StftConfig()


def stft(x, cfg: StftConfig | None = None) -> np.ndarray:
    """(frames, bins) complex spectrogram of a 1-D signal."""
    cfg = cfg or _DEFAULT_STFT
    samples = x.samples if hasattr(x, "samples") else np.asarray(x, dtype=np.float64)
    if samples.size < cfg.frame_length:
        raise ValueError(f"signal shorter than one frame ({cfg.frame_length})")
    n = 1 + (samples.size - cfg.frame_length) // cfg.hop
    idx = np.arange(cfg.frame_length)[None, :] + cfg.hop * np.arange(n)[:, None]
    return np.fft.rfft(samples[idx] * cfg.window(), axis=1)


def istft(spec: np.ndarray, cfg: StftConfig | None = None, length: int | None = None) -> np.ndarray:
    """Weighted overlap-add inverse of stft."""
    cfg = cfg or _DEFAULT_STFT
    frames = np.fft.irfft(spec, n=cfg.frame_length, axis=1)
    w = cfg.window()
    n = frames.shape[0]
    total = (n - 1) * cfg.hop + cfg.frame_length
    acc = np.zeros(total)
    norm = np.zeros(total)
    for m in range(n):
        sl = slice(m * cfg.hop, m * cfg.hop + cfg.frame_length)
        acc[sl] += frames[m] * w
        norm[sl] += w * w
    out = acc / np.maximum(norm, 1e-12)
    return out[:length] if length is not None else out


def lps(spec: np.ndarray) -> np.ndarray:
    """log(|spec|^2 + eps) feature matrix (frames, bins)."""
    return np.log(np.abs(spec) ** 2 + LPS_EPSILON)


def lps_invert(lps_frames: np.ndarray, phase: np.ndarray) -> np.ndarray:
    """Pair exp(lps/2) magnitudes with a supplied phase."""
    if lps_frames.shape != phase.shape:
        raise ValueError("lps and phase shapes differ")
    return np.exp(lps_frames / 2.0) * np.exp(1j * phase)


# ---------------------------------------------------------------------------
# the dense spectral-mapping baseline
# ---------------------------------------------------------------------------


@dataclass
class DdaeSpec:
    """Five hidden dense layers mapping multichannel LPS context frames
    to one enhanced LPS frame."""

    input_channels: int
    hidden_sizes: list = field(default_factory=lambda: [1024] * 5)
    context: int = 2                      # +-2 frames
    bins: int = _DEFAULT_STFT.bins

    def __post_init__(self):
        if len(self.hidden_sizes) != 5:
            raise ValueError("the baseline takes exactly five dense layers")

    @property
    def input_dim(self) -> int:
        return self.input_channels * (2 * self.context + 1) * self.bins

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DdaeSpec":
        return cls(**d)


class DdaeNetwork(Module):
    """Dense stack with LeakyReLU(0.3) between layers, linear output.

    Inputs are standardized with training-set feature statistics; the
    output layer's bias starts at the training-set mean target frame so
    the regression starts near the right operating point.
    """

    def __init__(self, spec: DdaeSpec, seed: int = 0):
        self.spec = spec
        self.trained = False
        rng = philox(seed ^ 0x44444145)
        sizes = [spec.input_dim] + list(spec.hidden_sizes)
        layers = []
        for i in range(len(sizes) - 1):
            layers.append(Dense(sizes[i], sizes[i + 1], rng=rng, name=f"dense{i}"))
            layers.append(LeakyReLU(0.3))
        self.hidden = Sequential(layers)
        self.out = Dense(sizes[-1], spec.bins, rng=rng, name="out")
        self.feature_mean = np.zeros(spec.input_dim)
        self.feature_scale = np.ones(spec.input_dim)

    def ddae_spec_dict(self):
        return self.spec.to_dict()

    def set_feature_stats(self, mean, scale):
        self.feature_mean[...] = mean
        self.feature_scale[...] = np.maximum(scale, 1e-6)

    def forward(self, frames):
        z = (frames - self.feature_mean) / self.feature_scale
        return self.out.forward(self.hidden.forward(z))

    def backward(self, grad):
        g = self.hidden.backward(self.out.backward(grad))
        return g / self.feature_scale

    def iter_modules(self):
        yield self
        yield from self.hidden.iter_modules()
        yield from self.out.iter_modules()

    def parameters(self):
        return self.hidden.parameters() + self.out.parameters()

    def state_arrays(self):
        return (self.hidden.state_arrays() + self.out.state_arrays()
                + [("feature_mean", self.feature_mean),
                   ("feature_scale", self.feature_scale)])

    def set_training(self, flag):
        self.training = flag
        self.hidden.set_training(flag)
        self.out.set_training(flag)


def assemble_context(channel_lps: list[np.ndarray], context: int = 2) -> np.ndarray:
    """(frames, channels*(2c+1)*bins) context matrix with edge replication."""
    stacked = []
    for mat in channel_lps:
        padded = np.pad(mat, ((context, context), (0, 0)), mode="edge")
        for off in range(2 * context + 1):
            stacked.append(padded[off:off + mat.shape[0]])
    return np.concatenate(stacked, axis=1)


def _segment_features(segment, spec: DdaeSpec, cfg: StftConfig):
    specs = [stft(segment.channels[c], cfg) for c in range(segment.n_channels)]
    context = assemble_context([lps(s) for s in specs], spec.context)
    clean = lps(stft(segment.reference, cfg))
    return context, clean, specs


def train_ddae(network: DdaeNetwork, corpus, cfg, stft_cfg: StftConfig | None = None):
    """MSE regression of clean LPS frames from multichannel noisy context."""
    from .training import TrainLog, TrainingDivergedError, validation_split
    import time as _time

    stft_cfg = stft_cfg or _DEFAULT_STFT
    spec = network.spec
    if corpus[0].n_channels != spec.input_channels:
        raise ValueError("corpus channel count does not match the baseline spec")
    features = {}
    for seg in corpus:
        context, clean, _ = _segment_features(seg, spec, stft_cfg)
        features[seg.uid] = (context, clean)

    train_set, val_set = validation_split(corpus, cfg.validation)
    train_feats = np.concatenate([features[s.uid][0] for s in train_set])
    network.set_feature_stats(train_feats.mean(axis=0), train_feats.std(axis=0))
    mean_target = np.concatenate([features[s.uid][1] for s in train_set]).mean(axis=0)
    network.out.bias.value[...] = mean_target

    rng = philox(cfg.seed ^ 0x4C5053)
    params = network.parameters()
    opt = Adam(params, learning_rate=cfg.learning_rate)
    log = TrainLog(seed=cfg.seed, config=asdict(cfg))

    def eval_mse(segments):
        network.set_training(False)
        total = 0.0
        for seg in segments:
            context, clean = features[seg.uid]
            total += mse_loss(network.forward(context), clean)
        return total / len(segments)

    best_val = np.inf
    best_snapshot = None
    since_best = 0
    for epoch in range(1, cfg.max_epochs + 1):
        t0 = _time.perf_counter()
        order = rng.permutation(len(train_set))
        losses = []
        for b0 in range(0, len(order), cfg.batch_size):
            batch = order[b0:b0 + cfg.batch_size]
            opt.zero_grad()
            batch_loss = 0.0
            for idx in batch:
                context, clean = features[train_set[idx].uid]
                network.set_training(True)
                out = network.forward(context)
                loss = mse_loss(out, clean)
                if not np.isfinite(loss):
                    raise TrainingDivergedError(f"baseline loss diverged at epoch {epoch}")
                network.backward(mse_loss_grad(out, clean) / len(batch))
                batch_loss += loss
            clip_grad_norm(params, cfg.grad_clip)
            opt.step()
            losses.append(batch_loss / len(batch))
        val_mse = eval_mse(val_set)
        log.add(epoch, float(np.mean(losses)), val_mse, _time.perf_counter() - t0)
        if val_mse < best_val:
            best_val = val_mse
            best_snapshot = [(n, a.copy()) for n, a in network.state_arrays()]
            since_best = 0
        else:
            since_best += 1
        if not cfg.run_all_epochs and since_best >= cfg.patience:
            break
    if best_snapshot is not None:
        for (_, arr), (_, saved) in zip(network.state_arrays(), best_snapshot):
            arr[...] = saved
    network.set_training(False)
    network.trained = True
    return log


def ddae_enhance(network: DdaeNetwork, segment, stft_cfg: StftConfig | None = None,
                 phase_channel: int = 0) -> np.ndarray:
    """Enhanced waveform using the stated noisy channel's phase."""
    stft_cfg = stft_cfg or _DEFAULT_STFT
    network.set_training(False)
    context, _, specs = _segment_features(segment, network.spec, stft_cfg)
    enhanced_lps = network.forward(context)
    phase = np.angle(specs[phase_channel])
    out = istft(lps_invert(enhanced_lps, phase), stft_cfg, length=segment.length)
    peak = np.max(np.abs(out))
    return out / peak if peak > 0 else out


def ddae_lps_mse(network: DdaeNetwork, segment, stft_cfg: StftConfig | None = None):
    """(enhanced LPS MSE, noisy phase-channel LPS MSE) against clean LPS."""
    stft_cfg = stft_cfg or _DEFAULT_STFT
    network.set_training(False)
    context, clean, specs = _segment_features(segment, network.spec, stft_cfg)
    enhanced = network.forward(context)
    noisy = lps(specs[0])
    return mse_loss(enhanced, clean), mse_loss(noisy, clean)


def export_spectrogram(x, out_base, cfg: StftConfig | None = None):
    """CSV (frames x bins, dB) and greyscale PNG for one waveform."""
    cfg = cfg or _DEFAULT_STFT
    mag_db = 10.0 * lps(stft(x, cfg)) / np.log(10.0)
    out_base = Path(out_base)
    with open(out_base.with_suffix(".csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"bin{b}" for b in range(mag_db.shape[1])])
        for row in mag_db:
            writer.writerow([f"{v:.2f}" for v in row])
    write_png_gray(out_base.with_suffix(".png"),
                   array_to_gray(mag_db.T[::-1], vmin=mag_db.max() - 80.0, vmax=mag_db.max()))
    return mag_db
