"""Synthetic query/reference training pairs from source-separated stems.

A random disjoint partition of a track's stems forms the query (sum of
one subset) and the reference (the query, shifted/gained, mixed with the
other subset, then pitch-shifted and time-stretched).  All augmentation
parameters are drawn uniformly from `AugRanges`; the draw order is fixed
(partition, offset, gain, semitones, stretch) so a seeded generator
reproduces pairs byte-exactly.

Stretch convention: a rate of 1.5 plays 50% faster (output shorter).  The
reference is center-cropped or zero-padded back to the segment length
after stretching so both pair members have identical shapes.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .audio import Waveform, load_audio
from .dsp import pitch_shift, resample_by_ratio, time_stretch

CANONICAL_STEMS = ("vocals", "drums", "bass", "other")


class StemSet:
    """Named, equal-length, equal-rate mono stems of one track (K >= 2)."""

    def __init__(self, stems: dict[str, Waveform], track_id: str = ""):
        if len(stems) < 2:
            raise ValueError("StemSet needs at least 2 stems")
        lengths = {w.samples.size for w in stems.values()}
        rates = {w.sample_rate for w in stems.values()}
        if len(lengths) != 1:
            raise ValueError(f"stem lengths differ: {sorted(lengths)}")
        if len(rates) != 1:
            raise ValueError(f"stem rates differ: {sorted(rates)}")
        self.stems = dict(stems)
        self.names = list(stems.keys())
        self.track_id = track_id
        self.sample_rate = next(iter(rates))
        self.n_samples = next(iter(lengths))

    @property
    def duration(self):
        return self.n_samples / self.sample_rate

    def __len__(self):
        return len(self.stems)


@dataclass
class AugRanges:
    offset_s: float = 0.250
    gain_db: float = 10.0
    pitch_semitones: float = 3.0
    stretch: tuple[float, float] = (0.70, 1.50)

    @classmethod
    def identity(cls):
        return cls(offset_s=0.0, gain_db=0.0, pitch_semitones=0.0, stretch=(1.0, 1.0))


@dataclass
class TrainPair:
    x_q: Waveform
    x_r: Waveform
    provenance: dict = field(default_factory=dict)


def partition_stems(stems: StemSet, rng):
    """Uniform draw over the 2^K - 2 (non-empty, disjoint, exhaustive)
    assignments of stems to (query, reference) subsets."""
    k = len(stems)
    if k < 2:
        raise ValueError("need at least 2 stems to partition")
    mask = int(rng.integers(1, 2 ** k - 1))
    s_q = [name for i, name in enumerate(stems.names) if mask >> i & 1]
    s_r = [name for i, name in enumerate(stems.names) if not mask >> i & 1]
    return s_q, s_r


def aug1(x: Waveform, offset_s, gain_db) -> Waveform:
    """Time offset (zero-filled, length preserved) then gain in dB."""
    if abs(offset_s) > 0.25 + 1e-9:
        raise ValueError(f"offset {offset_s}s outside +/-250ms")
    if abs(gain_db) > 10.0 + 1e-9:
        raise ValueError(f"gain {gain_db}dB outside +/-10dB")
    shift = int(round(offset_s * x.sample_rate))
    out = np.zeros_like(x.samples)
    if shift > 0:
        out[shift:] = x.samples[:-shift or None]
    elif shift < 0:
        out[:shift] = x.samples[-shift:]
    else:
        out[:] = x.samples
    out = out * np.float32(10.0 ** (gain_db / 20.0))
    return Waveform(out, x.sample_rate)


def aug2(x: Waveform, semitones, stretch_rate) -> Waveform:
    """Pitch shift (duration preserving) then time stretch.

    Output length is round(len(x) / stretch_rate).  Internally the
    duration-restoring stretch of the pitch shift and the requested
    stretch are fused into one phase-vocoder pass.
    """
    if abs(semitones) > 3.0 + 1e-9:
        raise ValueError(f"pitch shift {semitones} semitones outside +/-3")
    if not 0.70 - 1e-9 <= stretch_rate <= 1.50 + 1e-9:
        raise ValueError(f"stretch rate {stretch_rate} outside [0.70, 1.50]")
    samples = np.asarray(x.samples, dtype=np.float64)
    if semitones == 0.0 and stretch_rate == 1.0:
        return Waveform(samples.astype(np.float32), x.sample_rate)

    target = int(round(samples.size / stretch_rate))
    if semitones != 0.0:
        ratio = 2.0 ** (semitones / 12.0)
        samples = resample_by_ratio(samples, ratio)
    if samples.size != target:
        samples = time_stretch(samples, samples.size / target)
    return Waveform(samples.astype(np.float32), x.sample_rate)


def _fit_length(samples, n):
    """Center-crop or zero-pad to exactly n samples."""
    if samples.size == n:
        return samples
    if samples.size > n:
        start = (samples.size - n) // 2
        return samples[start:start + n]
    pad = n - samples.size
    left = pad // 2
    return np.pad(samples, (left, pad - left))


def generate_pair(stems: StemSet, t, delta_t, ranges: AugRanges, rng) -> TrainPair:
    """One positive query/reference pair from the segment [t, t + delta_t)."""
    headroom = 0.25
    if t < 0 or t + delta_t + headroom > stems.duration + 1e-9:
        raise ValueError(
            f"segment [{t}, {t + delta_t}] + {headroom}s headroom exceeds "
            f"{stems.duration:.2f}s of audio"
        )
    sr = stems.sample_rate
    start = int(round(t * sr))
    n = int(round(delta_t * sr))

    s_q, s_r = partition_stems(stems, rng)
    offset = float(rng.uniform(-ranges.offset_s, ranges.offset_s))
    gain = float(rng.uniform(-ranges.gain_db, ranges.gain_db))
    semis = float(rng.uniform(-ranges.pitch_semitones, ranges.pitch_semitones))
    lo, hi = ranges.stretch
    stretch = float(rng.uniform(lo, hi))

    cuts = {name: stems.stems[name].samples[start:start + n] for name in stems.names}
    x_q = np.sum([cuts[name] for name in s_q], axis=0).astype(np.float32)
    query = Waveform(x_q, sr)

    mixed = aug1(query, offset, gain).samples.astype(np.float64)
    for name in s_r:
        mixed = mixed + cuts[name]
    x_r = aug2(Waveform(mixed.astype(np.float32), sr), semis, stretch)
    x_r = Waveform(_fit_length(x_r.samples, n), sr)

    return TrainPair(
        x_q=query,
        x_r=x_r,
        provenance={
            "track_id": stems.track_id,
            "t": t,
            "delta_t": delta_t,
            "query_stems": s_q,
            "reference_stems": s_r,
            "offset_s": offset,
            "gain_db": gain,
            "semitones": semis,
            "stretch_rate": stretch,
        },
    )


def load_stem_set(track_dir, target_rate=16_000) -> StemSet:
    """Read `<track_dir>/{vocals,drums,bass,other}.wav` (missing stems skipped)."""
    stems = {}
    for name in CANONICAL_STEMS:
        path = os.path.join(track_dir, f"{name}.wav")
        if os.path.exists(path):
            stems[name] = load_audio(path, target_rate)
    if len(stems) < 2:
        raise ValueError(f"{track_dir}: found {len(stems)} stems, need >= 2")
    n = min(w.samples.size for w in stems.values())
    stems = {k: Waveform(w.samples[:n], target_rate) for k, w in stems.items()}
    return StemSet(stems, track_id=os.path.basename(os.path.normpath(track_dir)))
