"""Multichannel WAV ingestion, segmentation, and the synthetic corpus
generator.

The generator emulates three recording setups on top of a shared
speech-like surrogate signal (harmonic pulse trains with drifting
fundamental, formant-shaped envelopes, fricative noise bursts, and
silences):

* ``iem``    -- two in-ear-style channels, low-passed at 1.8 and 2.2 kHz
  with channel-shaped noise at 30 dB SNR.
* ``dm``     -- five far-field channels: random exponentially decaying
  reverb tails, per-channel gain, white noise at 15-25 dB SNR.
* ``chime``  -- six channels sharing one of four stationary/modulated
  noise classes at 0-10 dB SNR.

Everything is deterministic per seed: utterance u of corpus seed s uses
a counter-based generator keyed by ``s ^ u``, so parallel generation
cannot change the output.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.io import wavfile

__all__ = [
    "Waveform",
    "MultichannelSegment",
    "ChannelModel",
    "load_wav",
    "load_wav_channels",
    "save_wav",
    "segment_and_normalize",
    "synthetic_speech",
    "synthesize_corpus",
    "write_corpus",
    "read_corpus",
    "TASKS",
]

SAMPLE_RATE = 16000
DEFAULT_SEGMENT_LENGTH = 36500
TASKS = ("iem", "dm", "chime")


def philox(seed: int) -> np.random.Generator:
    """Counter-based generator; bit-stable across platforms."""
    return np.random.Generator(np.random.Philox(key=np.uint64(seed & 0xFFFFFFFFFFFFFFFF)))


@dataclass
class Waveform:
    """Single-channel sampled audio in [-1, 1]."""

    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)

    def __len__(self):
        return self.samples.size

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass
class MultichannelSegment:
    """N degraded channels plus the clean reference, equal lengths."""

    channels: np.ndarray          # (N, L)
    reference: np.ndarray         # (L,)
    uid: int = 0
    task: str = ""
    sample_rate: int = SAMPLE_RATE
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.channels = np.atleast_2d(np.asarray(self.channels, dtype=np.float64))
        self.reference = np.asarray(self.reference, dtype=np.float64).reshape(-1)
        if self.channels.shape[1] != self.reference.size:
            raise ValueError("channels and reference must share length")

    @property
    def n_channels(self) -> int:
        return self.channels.shape[0]

    @property
    def length(self) -> int:
        return self.channels.shape[1]

    def select_channels(self, indices) -> "MultichannelSegment":
        return MultichannelSegment(
            channels=self.channels[list(indices)], reference=self.reference,
            uid=self.uid, task=self.task, sample_rate=self.sample_rate,
            meta=dict(self.meta))


@dataclass
class ChannelModel:
    """One channel's degradation recipe: FIR, gain, additive noise."""

    kind: str                     # iem | farfield | noisemix
    fir: np.ndarray | None
    gain: float = 1.0
    noise_kind: str = "white"     # white | babble-surrogate
    snr_db: float = 30.0
    seed: int = 0

    def describe(self) -> dict:
        d = {"kind": self.kind, "gain": round(self.gain, 6),
             "noise_kind": self.noise_kind, "snr_db": round(self.snr_db, 3),
             "seed": int(self.seed)}
        if self.fir is not None:
            d["fir_taps"] = int(self.fir.size)
        return d


# ---------------------------------------------------------------------------
# WAV files
# ---------------------------------------------------------------------------


def _read_wav_array(path):
    with open(path, "rb") as fh:
        header = fh.read(8)
        if len(header) < 8 or header[:4] != b"RIFF":
            raise ValueError(f"{path} is not a RIFF/WAVE file")
        declared = int.from_bytes(header[4:8], "little") + 8
        fh.seek(0, 2)
        if fh.tell() < declared:
            raise ValueError(f"{path} is truncated ({fh.tell()} of {declared} bytes)")
    try:
        import warnings

        with warnings.catch_warnings():
            warnings.simplefilter("error", wavfile.WavFileWarning)
            rate, data = wavfile.read(path)
    except Exception as exc:
        raise ValueError(f"cannot read WAV file {path}: {exc}") from exc
    if rate != SAMPLE_RATE:
        raise ValueError(
            f"unsupported sample rate {rate} Hz in {path}; the pipeline "
            f"requires {SAMPLE_RATE} Hz input (resampling is not performed)")
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32:
        samples = data.astype(np.float64)
    else:
        raise ValueError(f"unsupported WAV encoding {data.dtype} in {path}; "
                         "use PCM16 or IEEE float32")
    return samples


def load_wav(path) -> Waveform:
    """Read a mono 16 kHz PCM16/float32 WAV file."""
    samples = _read_wav_array(path)
    if samples.ndim != 1:
        raise ValueError(f"{path} has {samples.shape[1]} channels; "
                         "use load_wav_channels for multichannel files")
    return Waveform(samples)


def load_wav_channels(path) -> list[Waveform]:
    """Read a mono or multichannel WAV as a list of channels."""
    samples = _read_wav_array(path)
    if samples.ndim == 1:
        return [Waveform(samples)]
    return [Waveform(samples[:, c]) for c in range(samples.shape[1])]


def save_wav(path, waveform, encoding: str = "float32"):
    """Write mono or (N, L) multichannel audio.

    float32 writes samples verbatim; pcm16 rounds to value*32768 (the
    inverse of the PCM16 decode), so decode->encode is bit-exact.
    """
    if isinstance(waveform, Waveform):
        data = waveform.samples
    else:
        data = np.asarray(waveform, dtype=np.float64)
    if data.ndim == 2:
        data = data.T  # wavfile expects (frames, channels)
    if encoding == "float32":
        wavfile.write(path, SAMPLE_RATE, data.astype(np.float32))
    elif encoding == "pcm16":
        scaled = np.clip(np.round(data * 32768.0), -32768, 32767)
        wavfile.write(path, SAMPLE_RATE, scaled.astype(np.int16))
    else:
        raise ValueError(f"unknown encoding {encoding!r}")


# ---------------------------------------------------------------------------
# segmentation
# ---------------------------------------------------------------------------


def segment_and_normalize(x, segment_length: int = DEFAULT_SEGMENT_LENGTH) -> list[np.ndarray]:
    """Cut into non-overlapping peak-normalized segments.

    The trailing remainder is dropped; all-zero segments are dropped as
    silence.  Every surviving segment has max |sample| == 1 exactly.
    """
    samples = x.samples if isinstance(x, Waveform) else np.asarray(x, dtype=np.float64)
    if samples.size == 0:
        raise ValueError("empty waveform")
    out = []
    for start in range(0, samples.size - segment_length + 1, segment_length):
        seg = samples[start:start + segment_length].copy()
        peak = np.max(np.abs(seg))
        if peak == 0.0:
            continue
        out.append(seg / peak)
    return out


# ---------------------------------------------------------------------------
# filters
# ---------------------------------------------------------------------------


def windowed_sinc_lowpass(cutoff_hz: float, taps: int = 101) -> np.ndarray:
    """Hamming-windowed sinc low-pass FIR, unit DC gain."""
    fc = cutoff_hz / SAMPLE_RATE
    t = np.arange(taps) - (taps - 1) / 2.0
    h = 2.0 * fc * np.sinc(2.0 * fc * t)
    h *= 0.54 - 0.46 * np.cos(2.0 * np.pi * np.arange(taps) / (taps - 1))
    return h / h.sum()


def windowed_sinc_bandpass(f_lo_hz: float, f_hi_hz: float, taps: int = 101) -> np.ndarray:
    lo = windowed_sinc_lowpass(f_lo_hz, taps)
    hi = windowed_sinc_lowpass(f_hi_hz, taps)
    return hi - lo


def _filter_same(x: np.ndarray, fir: np.ndarray) -> np.ndarray:
    """Zero-phase-aligned FIR ('same' mode centers the group delay)."""
    return np.convolve(x, fir, mode="same")


def _filter_causal(x: np.ndarray, fir: np.ndarray) -> np.ndarray:
    return np.convolve(x, fir)[:x.size]


def _shape_noise_spectrum(noise: np.ndarray, shaper) -> np.ndarray:
    spec = np.fft.rfft(noise)
    freqs = np.fft.rfftfreq(noise.size, d=1.0 / SAMPLE_RATE)
    spec *= shaper(freqs)
    shaped = np.fft.irfft(spec, n=noise.size)
    return shaped / (np.std(shaped) + 1e-12)


def _noise(kind: str, length: int, rng) -> np.ndarray:
    white = rng.standard_normal(length)
    if kind == "white":
        return white
    if kind == "babble-surrogate":
        # speech-band concentration plus slow amplitude modulation
        shaped = _shape_noise_spectrum(white, lambda f: 1.0 / (1.0 + (f / 500.0) ** 1.5))
        mod_hz = rng.uniform(3.0, 8.0)
        phase = rng.uniform(0, 2 * np.pi)
        t = np.arange(length) / SAMPLE_RATE
        am = 1.0 + 0.7 * np.sin(2 * np.pi * mod_hz * t + phase)
        return shaped * am
    raise ValueError(f"unknown noise kind {kind!r}")


def _add_noise_at_snr(signal: np.ndarray, noise: np.ndarray, snr_db: float) -> np.ndarray:
    p_sig = np.mean(signal ** 2)
    p_noise = np.mean(noise ** 2) + 1e-30
    scale = np.sqrt(p_sig / (p_noise * 10.0 ** (snr_db / 10.0)))
    return signal + scale * noise


# ---------------------------------------------------------------------------
# speech surrogate
# ---------------------------------------------------------------------------

_FRICATIVE_FIR = windowed_sinc_bandpass(1600.0, 5600.0, taps=101)


def _formant_envelope(freqs, formants, gains, widths):
    env = np.full_like(freqs, 0.12)
    for fc, g, w in zip(formants, gains, widths):
        env = env + g * np.exp(-0.5 * ((freqs - fc) / w) ** 2)
    return env / (1.0 + (freqs / 700.0) ** 0.9)


def _voiced_piece(length: int, f0_start: float, f0_end: float, formants, rng) -> np.ndarray:
    f0 = np.linspace(f0_start, f0_end, length)
    f0 *= 1.0 + 0.01 * np.sin(2 * np.pi * 5.0 * np.arange(length) / SAMPLE_RATE
                              + rng.uniform(0, 2 * np.pi))
    phase = 2.0 * np.pi * np.cumsum(f0) / SAMPLE_RATE
    gains = [1.0, 0.7, 0.52, 0.3]
    widths = [110.0, 170.0, 260.0, 340.0]
    n_harm = int(7600.0 // max(f0.max(), 1.0))
    piece = np.zeros(length)
    h = np.arange(1, n_harm + 1)[:, None]
    harm_freq = h * f0[None, :]
    amp = _formant_envelope(harm_freq, formants, gains, widths)
    amp[harm_freq > 7600.0] = 0.0
    piece = np.sum(amp * np.sin(h * phase[None, :]), axis=0)
    # aspiration keeps per-band envelopes off the floor during voicing
    breath = _filter_same(rng.standard_normal(length), _FRICATIVE_FIR)
    piece += 0.06 * breath * np.sqrt(np.mean(piece ** 2)) / (np.std(breath) + 1e-12)
    ramp = min(length // 4, 240)
    if ramp > 0:
        win = np.sin(0.5 * np.pi * np.arange(ramp) / ramp) ** 2
        piece[:ramp] *= win
        piece[-ramp:] *= win[::-1]
    return piece


def _fricative_piece(length: int, rng) -> np.ndarray:
    burst = _filter_same(rng.standard_normal(length), _FRICATIVE_FIR)
    t = np.arange(length)
    env = np.sin(np.pi * (t + 0.5) / length) ** 0.7
    wobble = 0.6 + 0.4 * np.abs(np.sin(2 * np.pi * rng.uniform(8, 20) * t / SAMPLE_RATE))
    return burst * env * wobble


def synthetic_speech(length: int, rng) -> np.ndarray:
    """A speech-like surrogate utterance: voiced syllables, fricative
    bursts, and silences, peak-normalized to 0.95."""
    out = np.zeros(length)
    pos = 0
    f0_base = rng.uniform(95.0, 220.0)
    f0_prev = f0_base * 2.0 ** rng.uniform(-0.2, 0.2)
    while pos < length:
        voiced_len = int(rng.uniform(0.12, 0.28) * SAMPLE_RATE)
        voiced_len = min(voiced_len, length - pos)
        if voiced_len > 200:
            f0_next = np.clip(f0_base * 2.0 ** rng.uniform(-0.3, 0.3), 80.0, 250.0)
            formants = [rng.uniform(320, 780), rng.uniform(950, 2400),
                        rng.uniform(2300, 3600), rng.uniform(3700, 4400)]
            piece = _voiced_piece(voiced_len, f0_prev, f0_next, formants, rng)
            rms = np.sqrt(np.mean(piece ** 2)) + 1e-12
            out[pos:pos + voiced_len] = piece / rms * rng.uniform(0.8, 1.0)
            f0_prev = f0_next
        pos += voiced_len
        if pos >= length:
            break
        if rng.uniform() < 0.7:
            fric_len = int(rng.uniform(0.05, 0.12) * SAMPLE_RATE)
            fric_len = min(fric_len, length - pos)
            if fric_len > 100:
                piece = _fricative_piece(fric_len, rng)
                rms = np.sqrt(np.mean(piece ** 2)) + 1e-12
                out[pos:pos + fric_len] = piece / rms * rng.uniform(0.35, 0.6)
            pos += fric_len
        if rng.uniform() < 0.65:
            pos += int(rng.uniform(0.03, 0.12) * SAMPLE_RATE)
    peak = np.max(np.abs(out))
    if peak == 0.0:  # pragma: no cover - timeline always places a syllable
        raise RuntimeError("surrogate synthesis produced silence")
    out = 0.95 * out / peak
    # room tone ~50 dB under the peak; recordings are never digitally silent
    out += 3.0e-3 * rng.standard_normal(length)
    return out


# ---------------------------------------------------------------------------
# channel recipes
# ---------------------------------------------------------------------------

_IEM_CUTOFFS = (1800.0, 2200.0)
_IEM_SNR_DB = 30.0
_REVERB_TAPS = 300
_REVERB_RT_S = 0.2
# mic-noise shelf: flat through the intelligibility-relevant range,
# rolled off above it so the channel's top octave stays quiet
_IEM_NOISE_SHELF = windowed_sinc_lowpass(4800.0, taps=61)


def _iem_noise(length: int, rng) -> np.ndarray:
    white = rng.standard_normal(length)
    return 0.25 * white + 0.75 * _filter_same(white, _IEM_NOISE_SHELF)


def iem_channel_pair(clean: np.ndarray, rng) -> tuple[np.ndarray, list[ChannelModel]]:
    """The two in-ear channels before peak normalization."""
    channels = []
    models = []
    for cutoff in _IEM_CUTOFFS:
        fir = windowed_sinc_lowpass(cutoff, taps=101)
        filtered = _filter_same(clean, fir)
        channels.append(_add_noise_at_snr(filtered, _iem_noise(clean.size, rng), _IEM_SNR_DB))
        models.append(ChannelModel(kind="iem", fir=fir, gain=1.0,
                                   noise_kind="white", snr_db=_IEM_SNR_DB))
    return np.stack(channels), models


_iem_channels = iem_channel_pair


def _reverb_fir(rng, drr_db: float) -> np.ndarray:
    t = np.arange(1, _REVERB_TAPS) / SAMPLE_RATE
    envelope = np.exp(-6.907755 * t / _REVERB_RT_S)   # -60 dB at RT
    tail = rng.standard_normal(_REVERB_TAPS - 1) * envelope
    tail *= np.sqrt(10.0 ** (-drr_db / 10.0) / (np.sum(tail ** 2) + 1e-30))
    return np.concatenate([[1.0], tail])


def _dm_channels(clean: np.ndarray, rng) -> tuple[np.ndarray, list[ChannelModel]]:
    channels = []
    models = []
    for _ in range(5):
        drr_db = rng.uniform(-4.0, 1.0)
        fir = _reverb_fir(rng, drr_db)
        gain = rng.uniform(0.3, 0.5)
        snr_db = rng.uniform(15.0, 25.0)
        degraded = gain * _filter_causal(clean, fir)
        degraded = _add_noise_at_snr(degraded, rng.standard_normal(clean.size), snr_db)
        channels.append(degraded)
        models.append(ChannelModel(kind="farfield", fir=fir, gain=gain,
                                   noise_kind="white", snr_db=snr_db))
    return np.stack(channels), models


_CHIME_CLASSES = ("white", "pink", "babble", "street")


def _chime_noise(kind: str, length: int, rng) -> np.ndarray:
    if kind == "white":
        return rng.standard_normal(length)
    if kind == "pink":
        return _shape_noise_spectrum(rng.standard_normal(length),
                                     lambda f: 1.0 / np.sqrt(np.maximum(f, 60.0)))
    if kind == "babble":
        return _noise("babble-surrogate", length, rng)
    if kind == "street":
        base = _shape_noise_spectrum(rng.standard_normal(length),
                                     lambda f: 1.0 / (1.0 + (f / 900.0) ** 2))
        t = np.arange(length) / SAMPLE_RATE
        am = 1.0 + 0.5 * np.sin(2 * np.pi * rng.uniform(0.8, 2.5) * t
                                + rng.uniform(0, 2 * np.pi))
        return base * am + 0.1 * rng.standard_normal(length)
    raise ValueError(kind)


def _chime_channels(clean: np.ndarray, rng) -> tuple[np.ndarray, list[ChannelModel]]:
    klass = _CHIME_CLASSES[rng.integers(0, len(_CHIME_CLASSES))]
    snr_db = rng.uniform(0.0, 10.0)
    shared = _chime_noise(klass, clean.size, rng)
    channels = []
    models = []
    for _ in range(6):
        own = _chime_noise(klass, clean.size, rng)
        noise = np.sqrt(0.8) * shared + np.sqrt(0.2) * own
        channels.append(_add_noise_at_snr(clean, noise, snr_db))
        models.append(ChannelModel(kind="noisemix", fir=None, gain=1.0,
                                   noise_kind=klass, snr_db=snr_db))
    return np.stack(channels), models


_TASK_BUILDERS = {"iem": _iem_channels, "dm": _dm_channels, "chime": _chime_channels}


def synthesize_corpus(task: str, n_utterances: int, seed: int,
                      segment_length: int = DEFAULT_SEGMENT_LENGTH) -> list[MultichannelSegment]:
    """Deterministic synthetic corpus for one task.

    Each utterance is one segment: the clean surrogate is degraded per
    channel, then every channel and the reference are independently
    peak-normalized.
    """
    if task not in _TASK_BUILDERS:
        raise ValueError(f"unknown task {task!r}; expected one of {TASKS}")
    if n_utterances < 1:
        raise ValueError("need at least one utterance")
    segments = []
    for u in range(n_utterances):
        rng = philox(seed ^ u)
        clean = synthetic_speech(segment_length, rng)
        channels, models = _TASK_BUILDERS[task](clean, rng)
        channels = channels / np.max(np.abs(channels), axis=1, keepdims=True)
        reference = clean / np.max(np.abs(clean))
        segments.append(MultichannelSegment(
            channels=channels, reference=reference, uid=u, task=task,
            meta={"seed": seed, "utterance_seed": seed ^ u,
                  "channel_models": [m.describe() for m in models]}))
    return segments


# ---------------------------------------------------------------------------
# on-disk corpora
# ---------------------------------------------------------------------------


def write_corpus(segments: list[MultichannelSegment], out_dir) -> Path:
    """WAV files plus a line-delimited JSON manifest; returns manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = out_dir / "manifest.jsonl"
    with open(manifest, "w") as fh:
        for seg in segments:
            ref_path = out_dir / f"utt{seg.uid:04d}_ref.wav"
            save_wav(ref_path, seg.reference)
            ch_paths = []
            for c in range(seg.n_channels):
                ch_path = out_dir / f"utt{seg.uid:04d}_ch{c}.wav"
                save_wav(ch_path, seg.channels[c])
                ch_paths.append(ch_path.name)
            record = {
                "uid": seg.uid,
                "task": seg.task,
                "reference": ref_path.name,
                "channels": ch_paths,
                "meta": seg.meta,
            }
            fh.write(json.dumps(record, sort_keys=True) + "\n")
    return manifest


def read_corpus(corpus_dir) -> list[MultichannelSegment]:
    corpus_dir = Path(corpus_dir)
    manifest = corpus_dir / "manifest.jsonl"
    if not manifest.exists():
        raise FileNotFoundError(f"no manifest.jsonl under {corpus_dir}")
    segments = []
    with open(manifest) as fh:
        for line in fh:
            rec = json.loads(line)
            reference = load_wav(corpus_dir / rec["reference"]).samples
            channels = np.stack([load_wav(corpus_dir / name).samples
                                 for name in rec["channels"]])
            segments.append(MultichannelSegment(
                channels=channels, reference=reference, uid=rec["uid"],
                task=rec.get("task", ""), meta=rec.get("meta", {})))
    return segments
