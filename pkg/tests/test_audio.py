"""Audio ingestion, segmentation, and Mel feature contracts."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.io import wavfile

from sampleid.audio import (MelConfig, Waveform, load_audio,
                            mel_center_frequencies, mel_filterbank,
                            mel_spectrogram, segment)

SR = 16_000


class TestLoadAudio:
    def test_identity_16k_mono(self, tmp_path):
        rng = np.random.default_rng(42)
        x = (rng.uniform(-0.5, 0.5, 64_000)).astype(np.float32)
        path = tmp_path / "a.wav"
        wavfile.write(path, SR, x)
        w = load_audio(path, SR)
        assert w.sample_rate == SR
        assert w.samples.size == 64_000
        np.testing.assert_allclose(w.samples, x, atol=1e-7)

    def test_exact_decimation_32k(self, tmp_path):
        rng = np.random.default_rng(1)
        x = rng.uniform(-0.5, 0.5, 128_000).astype(np.float32)
        path = tmp_path / "b.wav"
        wavfile.write(path, 32_000, x)
        w = load_audio(path, SR)
        assert w.sample_rate == SR
        assert abs(w.samples.size - 64_000) <= 1

    def test_stereo_cancellation(self, tmp_path):
        rng = np.random.default_rng(2)
        x = rng.uniform(-0.5, 0.5, 10_000).astype(np.float32)
        stereo = np.stack([x, -x], axis=1)
        path = tmp_path / "c.wav"
        wavfile.write(path, SR, stereo)
        w = load_audio(path, SR)
        np.testing.assert_allclose(w.samples, 0.0, atol=1e-7)

    def test_int16_scaling(self, tmp_path):
        x = np.array([16384, -16384, 0], dtype=np.int16)
        path = tmp_path / "d.wav"
        wavfile.write(path, SR, x)
        w = load_audio(path, SR)
        np.testing.assert_allclose(w.samples, [0.5, -0.5, 0.0], atol=1e-4)

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_audio(tmp_path / "nope.wav", SR)

    def test_zero_length(self, tmp_path):
        path = tmp_path / "e.wav"
        wavfile.write(path, SR, np.zeros(0, dtype=np.float32))
        with pytest.raises(ValueError, match="zero-length"):
            load_audio(path, SR)

    def test_garbage_file(self, tmp_path):
        path = tmp_path / "f.wav"
        path.write_bytes(b"this is not audio")
        with pytest.raises(ValueError, match="unreadable"):
            load_audio(path, SR)


class TestSegment:
    def test_ten_seconds_gives_13(self):
        w = Waveform(np.zeros(10 * SR, dtype=np.float32), SR)
        segs = segment(w, MelConfig())
        assert len(segs) == 13
        offsets = [o for o, _ in segs]
        np.testing.assert_allclose(offsets, np.arange(13) * 0.5)
        assert all(win.samples.size == 64_000 for _, win in segs)

    def test_exactly_one_window(self):
        w = Waveform(np.zeros(4 * SR, dtype=np.float32), SR)
        segs = segment(w, MelConfig())
        assert len(segs) == 1 and segs[0][0] == 0.0

    def test_too_short(self):
        w = Waveform(np.zeros(int(3.9 * SR), dtype=np.float32), SR)
        with pytest.raises(ValueError, match="too short"):
            segment(w, MelConfig())

    @given(duration=st.floats(min_value=4.0, max_value=40.0))
    @settings(max_examples=30, deadline=None)
    def test_count_formula(self, duration):
        n = int(duration * SR)
        w = Waveform(np.zeros(n, dtype=np.float32), SR)
        expected = (n - 64_000) // 8_000 + 1
        assert len(segment(w, MelConfig())) == expected


class TestMelSpectrogram:
    def test_silence_hits_log_floor(self):
        cfg = MelConfig()
        w = Waveform(np.zeros(64_000, dtype=np.float32), SR)
        spec = mel_spectrogram(w, cfg)
        assert spec.values.shape == (64, 32)
        np.testing.assert_allclose(spec.values, np.log(cfg.log_floor), atol=1e-5)

    def test_shape_and_finiteness_on_noise(self):
        cfg = MelConfig()
        for seed in (0, 1):
            x = np.random.default_rng(seed).standard_normal(64_000) * 0.1
            spec = mel_spectrogram(Waveform(x.astype(np.float32), SR), cfg)
            assert spec.values.shape == (64, 32)
            assert np.isfinite(spec.values).all()
            assert (spec.values >= np.log(cfg.log_floor) - 1e-6).all()

    def test_440hz_lands_in_bracketing_mel_bin(self):
        """Independent oracle: the filter whose center-frequency bracket
        contains 440 Hz, derived from the configured Mel scale."""
        cfg = MelConfig()
        centers = mel_center_frequencies(cfg.n_mels, SR)
        j = int(np.searchsorted(centers, 440.0)) - 1
        t = np.arange(64_000) / SR
        w = Waveform(np.sin(2 * np.pi * 440.0 * t).astype(np.float32), SR)
        spec = mel_spectrogram(w, cfg)
        argmax = spec.values.argmax(axis=0)
        assert set(argmax) <= {j, j + 1}, f"argmax bins {set(argmax)} vs bracket {j},{j+1}"

    def test_gain_shifts_log_power_by_2_ln_g(self):
        cfg = MelConfig()
        t = np.arange(64_000) / SR
        x = 0.45 * np.sin(2 * np.pi * 440.0 * t)
        a = mel_spectrogram(Waveform(x.astype(np.float32), SR), cfg).values
        b = mel_spectrogram(Waveform((2.0 * x).astype(np.float32), SR), cfg).values
        strong = a > np.log(cfg.log_floor) + 8.0
        assert strong.any()
        np.testing.assert_allclose((b - a)[strong], 2.0 * np.log(2.0), atol=1e-3)

    def test_deterministic(self):
        x = np.random.default_rng(3).standard_normal(64_000).astype(np.float32)
        w = Waveform(x, SR)
        a = mel_spectrogram(w, MelConfig()).values
        b = mel_spectrogram(w, MelConfig()).values
        assert np.array_equal(a, b)

    def test_wrong_length_rejected(self):
        w = Waveform(np.zeros(123, dtype=np.float32), SR)
        with pytest.raises(ValueError, match="exactly"):
            mel_spectrogram(w, MelConfig())

    def test_nan_rejected(self):
        x = np.zeros(64_000, dtype=np.float32)
        x[5] = np.nan
        with pytest.raises(ValueError, match="non-finite"):
            mel_spectrogram(Waveform(x, SR), MelConfig())


class TestFilterbank:
    def test_covers_zero_to_nyquist(self):
        fb = mel_filterbank(64, 1024, SR)
        assert fb.shape == (64, 513)
        # every filter has support, and centers are increasing
        assert (fb.max(axis=1) > 0).all()
        centers = mel_center_frequencies(64, SR)
        assert (np.diff(centers) > 0).all()
        assert centers[0] > 0 and centers[-1] < SR / 2
