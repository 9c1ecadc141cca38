"""RunConfig validation and CLI exit-code / report contracts."""

import json
import os

import numpy as np
import pytest

from sampleid.audio import MelConfig, Waveform, save_wav
from sampleid.classifier import MhcaParams
from sampleid.cli import main
from sampleid.config import RunConfig
from sampleid.encoder import EncoderConfig, EncoderParams
from sampleid.weights import save_weights

SR = 16_000

TINY_MEL = dict(n_mels=16, n_frames=8, window_seconds=4.0, hop_seconds=0.5,
                fft_size=256, stft_hop=8000)


class TestRunConfig:
    def test_defaults_mirror_standard_setup(self):
        cfg = RunConfig()
        assert cfg.sample_rate == 16_000
        mel = cfg.mel_config()
        assert (mel.n_mels, mel.n_frames) == (64, 32)
        assert (mel.window_seconds, mel.hop_seconds) == (4.0, 0.5)
        enc = cfg.encoder_config()
        assert (enc.node_count, enc.node_dim, enc.fp_dim) == (32, 512, 128)
        assert cfg.encoder_train_config().tau == 0.05
        assert cfg.encoder_train_config().batch_size == 64
        assert cfg.data["retrieval"]["threshold"] == 0.5

    def test_unknown_key_rejected(self):
        with pytest.raises(ValueError, match="unknown config key: audio.bogus"):
            RunConfig({"audio": {"bogus": 1}})
        with pytest.raises(ValueError, match="unknown config key: nonsense"):
            RunConfig({"nonsense": True})

    def test_hash_stable_and_sensitive(self):
        a = RunConfig().config_hash()
        b = RunConfig().config_hash()
        assert a == b
        c = RunConfig({"seed": 99}).config_hash()
        assert c != a

    def test_overrides(self):
        cfg = RunConfig()
        cfg.apply_overrides({"retrieval.topk_per_segment": 5})
        assert cfg.data["retrieval"]["topk_per_segment"] == 5
        with pytest.raises(ValueError, match="unknown"):
            cfg.apply_overrides({"retrieval.nope": 1})

    def test_from_file(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"seed": 5, "audio": {"n_mels": 32}}))
        cfg = RunConfig.from_file(path)
        assert cfg.seed == 5
        assert cfg.mel_config().n_mels == 32


def tiny_weights(tmp_path, with_classifier=True):
    params = EncoderParams.init(EncoderConfig.tiny(), np.random.default_rng(0))
    clf = (MhcaParams.init(16, n_heads=2, rng=np.random.default_rng(1))
           if with_classifier else None)
    path = tmp_path / "w.bin"
    save_weights(path, params, clf, MelConfig(**TINY_MEL), config_hash="t")
    return path


class TestCliContracts:
    def test_unknown_subcommand_exit_1(self, capsys):
        assert main(["frobnicate"]) == 1

    def test_query_without_index_is_usage_error(self, capsys):
        code = main(["query", "--db", "x", "--weights", "y",
                     "--audio", "z", "--out", "o"])
        assert code == 1
        assert "usage" in capsys.readouterr().err.lower()

    def test_missing_file_is_runtime_error(self, tmp_path):
        code = main(["fingerprint", "--audio", str(tmp_path / "none.wav"),
                     "--weights", str(tmp_path / "none.bin"),
                     "--out", str(tmp_path / "o.json")])
        assert code == 2

    def test_fingerprint_shape_contract(self, tmp_path):
        weights = tiny_weights(tmp_path)
        rng = np.random.default_rng(2)
        audio = tmp_path / "a.wav"
        save_wav(audio, Waveform(rng.uniform(-0.3, 0.3, 5 * SR).astype(np.float32), SR))
        out = tmp_path / "fp.json"
        code = main(["fingerprint", "--audio", str(audio), "--weights", str(weights),
                     "--out", str(out)])
        assert code == 0
        payload = json.loads(out.read_text())
        assert "config_hash" in payload and "seed" in payload
        fps = payload["fingerprints"]
        assert len(fps) == 3                      # (5 - 4) / 0.5 + 1
        assert all(len(f["vector"]) == 8 for f in fps)
        assert fps[1]["offset"] == pytest.approx(0.5)

    def test_gen_pairs_writes_sidecars(self, tmp_path):
        root = tmp_path / "stems" / "track0"
        root.mkdir(parents=True)
        rng = np.random.default_rng(3)
        for name in ("vocals", "drums"):
            save_wav(root / f"{name}.wav",
                     Waveform(rng.uniform(-0.2, 0.2, 6 * SR).astype(np.float32), SR))
        out = tmp_path / "pairs"
        code = main(["gen-pairs", "--root", str(tmp_path / "stems"),
                     "--count", "2", "--seed", "4", "--out", str(out)])
        assert code == 0
        files = sorted(os.listdir(out))
        assert files == ["pair_00000.json", "pair_00000_q.wav", "pair_00000_r.wav",
                         "pair_00001.json", "pair_00001_q.wav", "pair_00001_r.wav"]
        sidecar = json.loads((out / "pair_00000.json").read_text())
        assert {"offset_s", "gain_db", "semitones", "stretch_rate",
                "config_hash", "seed"} <= set(sidecar)

    def test_selftest_deterministic_reports(self, tmp_path):
        out1, out2 = tmp_path / "r1.json", tmp_path / "r2.json"
        assert main(["selftest", "--seed", "7", "--out", str(out1)]) == 0
        assert main(["selftest", "--seed", "7", "--out", str(out2)]) == 0
        a = json.loads(out1.read_text())
        b = json.loads(out2.read_text())
        a.pop("timestamp"), b.pop("timestamp")
        assert a == b

    def test_gradcheck_command(self):
        assert main(["gradcheck", "--tol", "1e-3"]) == 0

    def test_help_lists_defaults(self, capsys):
        with pytest.raises(SystemExit) as e:
            main(["query", "--help"])
        assert e.value.code == 0
        text = capsys.readouterr().out
        assert "--topk-per-segment" in text and "20" in text
        assert "--threshold" in text and "0.5" in text
