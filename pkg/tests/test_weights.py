"""Weights container: lossless round-trip, hashing, corruption handling."""

import numpy as np
import pytest

from sampleid.audio import MelConfig
from sampleid.classifier import MhcaParams
from sampleid.container import ContainerError, read_container, write_container
from sampleid.encoder import EncoderConfig, EncoderParams
from sampleid.weights import hash_params, load_weights, save_weights


@pytest.fixture
def params():
    return EncoderParams.init(EncoderConfig.tiny(), np.random.default_rng(0))


class TestRoundTrip:
    def test_encoder_only(self, tmp_path, params):
        path = tmp_path / "w.bin"
        save_weights(path, params, None, MelConfig(), config_hash="h1", seed=3)
        enc, clf, mel, meta = load_weights(path)
        assert clf is None
        assert meta["config_hash"] == "h1" and meta["seed"] == 3
        assert enc.config == params.config
        for name, t in params.named().items():
            stored = enc.named()[name]
            np.testing.assert_array_equal(stored.data,
                                          t.data.astype(np.float32).astype(np.float64))

    def test_with_classifier(self, tmp_path, params):
        clf = MhcaParams.init(16, n_heads=2, rng=np.random.default_rng(1))
        path = tmp_path / "w.bin"
        save_weights(path, params, clf, MelConfig())
        _, loaded, _, meta = load_weights(path)
        assert loaded is not None and meta["n_heads"] == 2
        for name, t in clf.named().items():
            np.testing.assert_array_equal(loaded.named()[name].data,
                                          t.data.astype(np.float32).astype(np.float64))

    def test_save_load_save_idempotent(self, tmp_path, params):
        p1, p2 = tmp_path / "a.bin", tmp_path / "b.bin"
        save_weights(p1, params, None, MelConfig())
        enc, _, mel, _ = load_weights(p1)
        save_weights(p2, enc, None, mel)
        assert p1.read_bytes() == p2.read_bytes()


class TestHash:
    def test_stable_and_sensitive(self, params):
        h1 = hash_params(params.named())
        h2 = hash_params(params.named())
        assert h1 == h2
        params.patch_w.data[0, 0] += 1.0
        assert hash_params(params.named()) != h1


class TestCorruption:
    def test_truncation_detected(self, tmp_path, params):
        path = tmp_path / "w.bin"
        save_weights(path, params)
        path.write_bytes(path.read_bytes()[:-7])
        with pytest.raises(ContainerError, match="checksum|truncated"):
            load_weights(path)

    def test_bitflip_detected(self, tmp_path, params):
        path = tmp_path / "w.bin"
        save_weights(path, params)
        raw = bytearray(path.read_bytes())
        raw[len(raw) // 2] ^= 0xFF
        path.write_bytes(bytes(raw))
        with pytest.raises(ContainerError, match="checksum"):
            load_weights(path)

    def test_wrong_magic(self, tmp_path):
        path = tmp_path / "w.bin"
        write_container(path, b"OTHR", {"kind": "other"}, {})
        with pytest.raises(ContainerError, match="kind|magic"):
            load_weights(path)

    def test_version_mismatch(self, tmp_path, params):
        import hashlib
        import struct
        path = tmp_path / "w.bin"
        save_weights(path, params)
        raw = bytearray(path.read_bytes())[:-32]
        raw[4:8] = struct.pack("<I", 99)
        raw = bytes(raw)
        path.write_bytes(raw + hashlib.sha256(raw).digest())
        with pytest.raises(ContainerError, match="version"):
            load_weights(path)


class TestContainerPrimitives:
    def test_block_dtypes(self, tmp_path):
        path = tmp_path / "c.bin"
        blocks = {
            "a": np.arange(6, dtype=np.float32).reshape(2, 3),
            "b": np.arange(4, dtype=np.int64),
            "c": np.arange(3, dtype=np.uint8),
            "d": np.array(2.5, dtype=np.float64),
        }
        write_container(path, b"TEST", {"kind": "t"}, blocks)
        meta, loaded = read_container(path, b"TEST")
        for k, v in blocks.items():
            np.testing.assert_array_equal(loaded[k], v)
            assert loaded[k].dtype == v.dtype
