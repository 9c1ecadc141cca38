"""Signal-processing primitives: STFT/ISTFT, phase-vocoder time stretch,
resampling-based pitch shift.

The stretch/shift pair is used by the training-pair augmentations.  Rate
convention throughout: stretch rate r makes playback r times faster, so
the output is len(x)/r samples long (r = 1.5 means 50% faster/shorter).
"""

from __future__ import annotations

from fractions import Fraction

import numpy as np
from scipy.signal import resample_poly


def _hann(n):
    # periodic Hann, the standard analysis window for OLA processing
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def stft(x, fft_size=1024, hop=256):
    """Complex STFT with centered frames (reflect padding).

    Returns an array of shape (fft_size // 2 + 1, n_frames).
    """
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        raise ValueError("empty signal")
    pad = fft_size // 2
    xp = np.pad(x, pad, mode="reflect") if x.size > 1 else np.pad(x, pad, mode="edge")
    n_frames = 1 + (xp.size - fft_size) // hop
    window = _hann(fft_size)
    frames = np.lib.stride_tricks.sliding_window_view(xp, fft_size)[::hop][:n_frames]
    return np.fft.rfft(frames * window, axis=1).T


def istft(spec, fft_size=1024, hop=256, length=None):
    """Inverse STFT by windowed overlap-add with window-square normalization."""
    n_frames = spec.shape[1]
    window = _hann(fft_size)
    frames = np.fft.irfft(spec.T, n=fft_size, axis=1) * window
    total = fft_size + hop * (n_frames - 1)
    out = np.zeros(total)
    wsum = np.zeros(total)
    for t in range(n_frames):
        start = t * hop
        out[start:start + fft_size] += frames[t]
        wsum[start:start + fft_size] += window * window
    good = wsum > 1e-10
    out[good] /= wsum[good]
    pad = fft_size // 2
    out = out[pad:]
    if length is not None:
        if out.size >= length:
            out = out[:length]
        else:
            out = np.pad(out, (0, length - out.size))
    return out


def time_stretch(x, rate, fft_size=1024, hop=256):
    """Phase-vocoder time stretch: output has round(len(x)/rate) samples.

    Output frame t interpolates the magnitudes of analysis frames around
    position t * rate and accumulates phase by the wrapped instantaneous
    frequency; the accumulation is a cumulative sum, so the whole pass is
    vectorized.
    """
    if rate <= 0:
        raise ValueError("rate must be positive")
    x = np.asarray(x, dtype=np.float64)
    target = int(round(x.size / rate))
    if rate == 1.0:
        return x.copy()
    spec = stft(x, fft_size, hop)
    n_bins, n_frames = spec.shape

    steps = np.arange(0, n_frames, rate)
    padded = np.concatenate([spec, np.zeros((n_bins, 2), dtype=spec.dtype)], axis=1)
    phi_advance = np.linspace(0, np.pi * hop, n_bins)[:, None]

    idx = steps.astype(np.int64)
    frac = steps - idx
    a = padded[:, idx]
    b = padded[:, idx + 1]
    mag = (1.0 - frac) * np.abs(a) + frac * np.abs(b)

    dphi = np.angle(b) - np.angle(a) - phi_advance
    dphi -= 2.0 * np.pi * np.round(dphi / (2.0 * np.pi))
    increments = phi_advance + dphi
    phase0 = np.angle(spec[:, 0])[:, None]
    phase = phase0 + np.concatenate(
        [np.zeros((n_bins, 1)), np.cumsum(increments[:, :-1], axis=1)], axis=1
    )
    out = mag * np.exp(1j * phase)
    return istft(out, fft_size, hop, length=target)


def resample_by_ratio(x, ratio):
    """Resample so the result is len(x)/ratio samples (ratio > 1 shortens).

    The ratio is approximated by a rational p/q (denominator <= 1000) for
    polyphase filtering; the approximation error is below 1e-6 relative.
    """
    if ratio <= 0:
        raise ValueError("ratio must be positive")
    if ratio == 1.0:
        return np.asarray(x, dtype=np.float64).copy()
    frac = Fraction(ratio).limit_denominator(1000)
    return resample_poly(np.asarray(x, dtype=np.float64), frac.denominator, frac.numerator)


def pitch_shift(x, semitones, fft_size=1024, hop=256):
    """Shift pitch by `semitones` while preserving duration.

    Resamples by 2^(semitones/12) (changing both pitch and length), then
    time-stretches back to the original number of samples.
    """
    x = np.asarray(x, dtype=np.float64)
    if semitones == 0:
        return x.copy()
    ratio = 2.0 ** (semitones / 12.0)
    shifted = resample_by_ratio(x, ratio)
    stretched = time_stretch(shifted, shifted.size / x.size, fft_size, hop)
    if stretched.size >= x.size:
        return stretched[:x.size]
    return np.pad(stretched, (0, x.size - stretched.size))


def dominant_frequency(x, sample_rate, fft_size=4096):
    """Frequency (Hz) of the strongest spectral peak, for augmentation checks."""
    x = np.asarray(x, dtype=np.float64)
    n = min(x.size, fft_size)
    windowed = x[:n] * _hann(n)
    mag = np.abs(np.fft.rfft(windowed, n=fft_size))
    return np.argmax(mag) * sample_rate / fft_size
