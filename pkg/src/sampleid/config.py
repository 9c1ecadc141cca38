"""Run configuration: one JSON file with per-subsystem sections, strict
unknown-key rejection, and a content hash embedded in every artifact so
mismatched weights/index/db combinations are caught.

Defaults mirror the standard experimental setup (16 kHz, 64x32 features,
4 s / 0.5 s windows, 128-d fingerprints, 32x512 node matrices, tau 0.05).
"""

from __future__ import annotations

import copy
import hashlib
import json

from .audio import MelConfig
from .encoder import EncoderConfig
from .index import IvfPqConfig
from .pairgen import AugRanges
from .training import ClassifierTrainConfig, EncoderTrainConfig

DEFAULTS = {
    "seed": 0,
    "threads": 1,
    "audio": {
        "sample_rate": 16_000,
        "n_mels": 64,
        "n_frames": 32,
        "window_seconds": 4.0,
        "hop_seconds": 0.5,
        "fft_size": 1024,
        "stft_hop": 2000,
        "log_floor": 1e-8,
    },
    "encoder": {
        "patch_grid": [8, 4],
        "patch_window": [16, 14],
        "embed_dim": 512,
        "node_dim": 512,
        "n_blocks": 4,
        "k": 8,
        "fp_dim": 128,
        "ffn_hidden": 1024,
        "proj_hidden": 512,
        "agg": "max",
    },
    "classifier": {
        "n_heads": 8,
    },
    "aug": {
        "offset_s": 0.25,
        "gain_db": 10.0,
        "pitch_semitones": 3.0,
        "stretch": [0.70, 1.50],
    },
    "index": {
        "nlist": 0,          # 0 = auto from database size
        "m": 16,
        "nbits": 8,
        "nprobe": 8,
        "keep_raw": True,
        "rerank_depth": 100,
    },
    "retrieval": {
        "topk_per_segment": 20,
        "threshold": 0.5,
        "max_query_segments": None,
    },
    "training": {
        "batch_size": 64,
        "epochs": 10,
        "steps_per_epoch": 20,
        "tau": 0.05,
        "lr_max": 1e-3,
        "lr_min": 1e-5,
        "val_fraction": 0.1,
        "patience": 10,
        "clf_batch_size": 32,
        "clf_epochs": 5,
        "clf_steps_per_epoch": 10,
        "clf_lr": 1e-3,
    },
}


def _merge(base, update, path=""):
    out = copy.deepcopy(base)
    for key, value in update.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise ValueError(f"unknown config key: {where}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ValueError(f"config key {where} must be a section")
            out[key] = _merge(base[key], value, where)
        else:
            out[key] = value
    return out


class RunConfig:
    def __init__(self, data=None):
        self.data = _merge(DEFAULTS, data or {})

    @classmethod
    def from_file(cls, path, overrides=None):
        with open(path, encoding="utf-8") as f:
            data = json.load(f)
        cfg = cls(data)
        if overrides:
            cfg.apply_overrides(overrides)
        return cfg

    def apply_overrides(self, overrides: dict):
        """Dotted-path overrides, e.g. {"retrieval.topk_per_segment": 10}."""
        for dotted, value in overrides.items():
            parts = dotted.split(".")
            node = self.data
            for p in parts[:-1]:
                if p not in node or not isinstance(node[p], dict):
                    raise ValueError(f"unknown config key: {dotted}")
                node = node[p]
            if parts[-1] not in node:
                raise ValueError(f"unknown config key: {dotted}")
            node[parts[-1]] = value

    @property
    def seed(self):
        return int(self.data["seed"])

    def config_hash(self) -> str:
        canonical = json.dumps(self.data, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode()).hexdigest()[:16]

    def mel_config(self) -> MelConfig:
        a = self.data["audio"]
        return MelConfig(n_mels=a["n_mels"], n_frames=a["n_frames"],
                         window_seconds=a["window_seconds"],
                         hop_seconds=a["hop_seconds"], fft_size=a["fft_size"],
                         stft_hop=a["stft_hop"], log_floor=a["log_floor"])

    @property
    def sample_rate(self):
        return int(self.data["audio"]["sample_rate"])

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig.from_dict(self.data["encoder"])

    def aug_ranges(self) -> AugRanges:
        a = self.data["aug"]
        return AugRanges(offset_s=a["offset_s"], gain_db=a["gain_db"],
                         pitch_semitones=a["pitch_semitones"],
                         stretch=tuple(a["stretch"]))

    def index_config(self, n_vectors, fp_dim) -> IvfPqConfig:
        i = self.data["index"]
        from .index import default_nlist
        nlist = i["nlist"] or min(default_nlist(n_vectors), max(1, n_vectors // 8))
        m = i["m"]
        while fp_dim % m != 0:
            m //= 2
        return IvfPqConfig(dim=fp_dim, nlist=max(1, nlist), m=max(1, m),
                           nbits=i["nbits"],
                           nprobe=max(1, min(i["nprobe"], max(1, nlist))),
                           keep_raw=i["keep_raw"],
                           rerank_depth=i["rerank_depth"], seed=self.seed)

    def encoder_train_config(self) -> EncoderTrainConfig:
        t = self.data["training"]
        return EncoderTrainConfig(
            encoder=self.encoder_config(), mel=self.mel_config(),
            aug=self.aug_ranges(), batch_size=t["batch_size"],
            epochs=t["epochs"], steps_per_epoch=t["steps_per_epoch"],
            tau=t["tau"], lr_max=t["lr_max"], lr_min=t["lr_min"],
            val_fraction=t["val_fraction"], patience=t["patience"],
            seed=self.seed,
        )

    def classifier_train_config(self) -> ClassifierTrainConfig:
        t = self.data["training"]
        return ClassifierTrainConfig(
            mel=self.mel_config(), aug=self.aug_ranges(),
            batch_size=t["clf_batch_size"], epochs=t["clf_epochs"],
            steps_per_epoch=t["clf_steps_per_epoch"],
            n_heads=self.data["classifier"]["n_heads"], lr=t["clf_lr"],
            seed=self.seed,
        )
