"""Audio ingestion, segmentation, and log-power Mel spectrogram features.

Feature geometry: 4-second windows hopped every 0.5 s at 16 kHz, each
reduced to a 64x32 log-power Mel matrix.  Frames are centered at
(k + 1/2) * stft_hop with reflect padding, which yields exactly
window_samples / stft_hop frames (64000 / 2000 = 32).  The filterbank is
Slaney-style (linear below 1 kHz, logarithmic above) with area
normalization; log is natural with an additive floor.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.io import wavfile

from .dsp import _hann, resample_by_ratio

DEFAULT_SAMPLE_RATE = 16_000


@dataclass
class Waveform:
    """Mono audio at a known sample rate, float32 samples in [-1, 1]."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float32)
        if self.samples.ndim != 1:
            raise ValueError("Waveform must be mono (1-D)")

    @property
    def duration(self):
        return self.samples.size / self.sample_rate


@dataclass
class MelConfig:
    n_mels: int = 64
    n_frames: int = 32
    window_seconds: float = 4.0
    hop_seconds: float = 0.5
    fft_size: int = 1024
    stft_hop: int = 2000
    log_floor: float = 1e-8

    def __post_init__(self):
        if self.n_mels < 1 or self.n_frames < 1:
            raise ValueError("n_mels and n_frames must be positive")
        if self.stft_hop < 1 or self.fft_size < 2:
            raise ValueError("stft_hop and fft_size must be positive")

    def validate_for_rate(self, sample_rate):
        window = self.window_samples(sample_rate)
        covered = self.stft_hop * self.n_frames
        if abs(covered - window) > self.stft_hop:
            raise ValueError(
                f"stft_hop * n_frames = {covered} does not cover the "
                f"{window}-sample window to within one frame"
            )

    def window_samples(self, sample_rate):
        return int(round(self.window_seconds * sample_rate))

    def hop_samples(self, sample_rate):
        return int(round(self.hop_seconds * sample_rate))

    def to_dict(self):
        return {
            "n_mels": self.n_mels,
            "n_frames": self.n_frames,
            "window_seconds": self.window_seconds,
            "hop_seconds": self.hop_seconds,
            "fft_size": self.fft_size,
            "stft_hop": self.stft_hop,
            "log_floor": self.log_floor,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class MelSpec:
    """Log-power Mel matrix of shape (n_mels, n_frames) for one segment."""

    values: np.ndarray
    source_offset: float = 0.0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim != 2:
            raise ValueError("MelSpec values must be 2-D")


def load_audio(path, target_rate=DEFAULT_SAMPLE_RATE) -> Waveform:
    """Read a PCM WAV file, mix down to mono, and resample to target_rate.

    Accepts 8/16/24/32-bit integer and 32/64-bit float encodings.  Output
    peak amplitude is rescaled to at most 1 when resampling overshoots.
    """
    try:
        rate, data = wavfile.read(path)
    except FileNotFoundError:
        raise
    except Exception as e:
        raise ValueError(f"unreadable WAV file {path}: {e}") from e

    if data.size == 0:
        raise ValueError(f"zero-length audio: {path}")

    if data.dtype == np.uint8:
        x = (data.astype(np.float64) - 128.0) / 128.0
    elif data.dtype == np.int16:
        x = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        x = data.astype(np.float64) / 2147483648.0
    elif data.dtype in (np.float32, np.float64):
        x = data.astype(np.float64)
    else:
        raise ValueError(f"unsupported WAV encoding {data.dtype} in {path}")

    if x.ndim == 2:
        x = x.mean(axis=1)

    if rate != target_rate:
        x = resample_by_ratio(x, rate / target_rate)

    peak = np.abs(x).max()
    if peak > 1.0:
        x = x / peak
    return Waveform(x.astype(np.float32), target_rate)


def save_wav(path, w: Waveform):
    wavfile.write(path, w.sample_rate, w.samples.astype(np.float32))


def segment(w: Waveform, cfg: MelConfig):
    """Split into overlapping windows; trailing audio shorter than a window
    is dropped.  Returns [(offset_seconds, Waveform)] with offsets 0, 0.5, ...
    """
    win = cfg.window_samples(w.sample_rate)
    hop = cfg.hop_samples(w.sample_rate)
    if w.samples.size < win:
        raise ValueError(
            f"too short: {w.duration:.3f}s audio, need {cfg.window_seconds}s"
        )
    count = (w.samples.size - win) // hop + 1
    out = []
    for i in range(count):
        start = i * hop
        out.append((start / w.sample_rate,
                    Waveform(w.samples[start:start + win], w.sample_rate)))
    return out


def _hz_to_mel(f):
    # Slaney scale: linear below 1 kHz, logarithmic above
    f = np.asarray(f, dtype=np.float64)
    mel = f / (200.0 / 3.0)
    log_step = np.log(6.4) / 27.0
    above = f >= 1000.0
    mel = np.where(above, 15.0 + np.log(np.maximum(f, 1000.0) / 1000.0) / log_step, mel)
    return mel


def _mel_to_hz(m):
    m = np.asarray(m, dtype=np.float64)
    f = m * (200.0 / 3.0)
    log_step = np.log(6.4) / 27.0
    above = m >= 15.0
    return np.where(above, 1000.0 * np.exp(log_step * (m - 15.0)), f)


def mel_filterbank(n_mels, fft_size, sample_rate):
    """Triangular Slaney filterbank matrix (n_mels, fft_size // 2 + 1),
    spanning 0 Hz to Nyquist, area-normalized (2 / bandwidth per filter)."""
    nyquist = sample_rate / 2.0
    mel_points = np.linspace(_hz_to_mel(0.0), _hz_to_mel(nyquist), n_mels + 2)
    hz_points = _mel_to_hz(mel_points)
    bin_freqs = np.fft.rfftfreq(fft_size, 1.0 / sample_rate)

    fb = np.zeros((n_mels, bin_freqs.size))
    for i in range(n_mels):
        lo, center, hi = hz_points[i], hz_points[i + 1], hz_points[i + 2]
        rising = (bin_freqs - lo) / max(center - lo, 1e-12)
        falling = (hi - bin_freqs) / max(hi - center, 1e-12)
        fb[i] = np.maximum(0.0, np.minimum(rising, falling))
        fb[i] *= 2.0 / (hi - lo)
    return fb


def mel_center_frequencies(n_mels, sample_rate):
    """Center frequency (Hz) of each Mel filter, for verification."""
    nyquist = sample_rate / 2.0
    mel_points = np.linspace(_hz_to_mel(0.0), _hz_to_mel(nyquist), n_mels + 2)
    return _mel_to_hz(mel_points)[1:-1]


def mel_spectrogram(window: Waveform, cfg: MelConfig) -> MelSpec:
    """Log-power Mel features for one fixed-length window.

    Frames are centered at (k + 1/2) * stft_hop, k = 0..n_frames-1, with
    reflect padding at the edges, so the frame count is exact.
    """
    x = np.asarray(window.samples, dtype=np.float64)
    cfg.validate_for_rate(window.sample_rate)
    expected = cfg.window_samples(window.sample_rate)
    if x.size != expected:
        raise ValueError(f"window must be exactly {expected} samples, got {x.size}")
    if not np.isfinite(x).all():
        raise ValueError("non-finite samples in window")

    half = cfg.fft_size // 2
    xp = np.pad(x, half, mode="reflect")
    win = _hann(cfg.fft_size)

    frames = np.empty((cfg.n_frames, cfg.fft_size))
    for k in range(cfg.n_frames):
        center = int((k + 0.5) * cfg.stft_hop) + half
        frames[k] = xp[center - half:center + half]
    spectrum = np.fft.rfft(frames * win, axis=1)
    power = (spectrum.real ** 2 + spectrum.imag ** 2).T

    fb = mel_filterbank(cfg.n_mels, cfg.fft_size, window.sample_rate)
    mel_power = fb @ power
    values = np.log(mel_power + cfg.log_floor)
    return MelSpec(values.astype(np.float32), source_offset=0.0)
