"""Procedural multi-stem toy tracks for self-tests and end-to-end runs.

Each track gets a distinct signature that survives the training
augmentations: a base pitch on a four-semitone grid, a chord interval,
an amplitude-modulation rate, a bass pulse period, and a noise band tied
to the base pitch.  Separate "noise" tracks (plain mixtures, never
sampled by any query) act as retrieval distractors.
"""

from __future__ import annotations

import numpy as np

from .audio import Waveform
from .pairgen import StemSet


def _sine(freq, t):
    return np.sin(2.0 * np.pi * freq * t)


def _band_noise(rng, n, sample_rate, lo, hi):
    spec = np.fft.rfft(rng.standard_normal(n))
    freqs = np.fft.rfftfreq(n, 1.0 / sample_rate)
    spec[(freqs < lo) | (freqs > hi)] = 0.0
    x = np.fft.irfft(spec, n=n)
    peak = np.abs(x).max()
    return x / peak if peak > 0 else x


def make_toy_track(track_no, duration=12.0, sample_rate=16_000,
                   seed=1234) -> StemSet:
    rng = np.random.default_rng((seed, track_no))
    n = int(duration * sample_rate)
    t = np.arange(n) / sample_rate

    base = 110.0 * 2.0 ** (track_no * 4.0 / 12.0)
    interval = (3, 4, 5, 7)[track_no % 4]
    second = base * 2.0 ** (interval / 12.0)
    am_rate = 0.5 + 0.35 * track_no
    am = 0.55 + 0.45 * np.sin(2.0 * np.pi * am_rate * t)

    tone = 0.5 * am * (_sine(base, t) + 0.6 * _sine(second, t)
                       + 0.3 * _sine(min(2.0 * base, 7000.0), t))

    pulse_period = 0.4 + 0.05 * track_no
    gate = (np.mod(t, pulse_period) < 0.5 * pulse_period).astype(np.float64)
    bass = 0.4 * gate * (_sine(base / 2.0, t) + 0.3 * _sine(base * 1.5, t))

    center = min(base * 3.0, 6500.0)
    texture = 0.25 * am * _band_noise(rng, n, sample_rate, center * 0.85, center * 1.15)

    stems = {
        "tone": Waveform(tone.astype(np.float32), sample_rate),
        "bass": Waveform(bass.astype(np.float32), sample_rate),
        "other": Waveform(texture.astype(np.float32), sample_rate),
    }
    return StemSet(stems, track_id=f"toy{track_no:02d}")


def make_noise_track(noise_no, duration=12.0, sample_rate=16_000,
                     seed=4321) -> Waveform:
    rng = np.random.default_rng((seed, noise_no))
    n = int(duration * sample_rate)
    t = np.arange(n) / sample_rate
    base = 130.0 * 2.0 ** (noise_no * 4.0 / 12.0 + 1.0 / 6.0)
    am = 0.5 + 0.5 * np.sin(2.0 * np.pi * (0.7 + 0.3 * noise_no) * t)
    x = 0.4 * am * (_sine(base, t) + 0.5 * _sine(base * 2 ** (9 / 12.0), t))
    x += 0.3 * _band_noise(rng, n, sample_rate, 100.0, 7000.0)
    return Waveform(x.astype(np.float32), sample_rate)


def track_mix(stems: StemSet) -> Waveform:
    total = np.zeros(stems.n_samples, dtype=np.float64)
    for w in stems.stems.values():
        total += w.samples
    return Waveform(total.astype(np.float32), stems.sample_rate)


def make_toy_dataset(n_tracks=16, duration=12.0, sample_rate=16_000, seed=1234):
    return [make_toy_track(i, duration, sample_rate, seed) for i in range(n_tracks)]
