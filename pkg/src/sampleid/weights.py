"""Model-weights container: encoder and classifier parameters plus the
feature/encoder configuration they were trained with.

Parameters are stored as float32 row-major blocks (in-memory float64
working copies are truncated on save); loading restores float64 tensors
whose values are exactly the stored float32s.
"""

from __future__ import annotations

import hashlib

import numpy as np

from .audio import MelConfig
from .autodiff import Tensor
from .classifier import MhcaParams
from .container import read_container, write_container
from .encoder import BlockParams, EncoderConfig, EncoderParams

MAGIC = b"SIDW"


def hash_params(named: dict[str, Tensor]) -> str:
    h = hashlib.sha256()
    for name in sorted(named):
        data = np.ascontiguousarray(named[name].data)
        h.update(name.encode())
        h.update(str(data.shape).encode())
        h.update(data.tobytes())
    return h.hexdigest()


def save_weights(path, encoder_params: EncoderParams,
                 classifier_params: MhcaParams | None = None,
                 mel_config: MelConfig | None = None,
                 config_hash: str = "", seed: int | None = None):
    blocks = {}
    for name, t in encoder_params.named().items():
        blocks[f"encoder/{name}"] = t.data.astype(np.float32)
    meta = {
        "kind": "weights",
        "encoder_config": encoder_params.config.to_dict(),
        "mel_config": (mel_config or MelConfig()).to_dict(),
        "config_hash": config_hash,
        "seed": seed,
        "has_classifier": classifier_params is not None,
    }
    if classifier_params is not None:
        for name, t in classifier_params.named().items():
            blocks[f"classifier/{name}"] = t.data.astype(np.float32)
        meta["n_heads"] = classifier_params.n_heads
    write_container(path, MAGIC, meta, blocks)


def load_weights(path):
    """Returns (EncoderParams, MhcaParams | None, MelConfig, meta dict)."""
    meta, blocks = read_container(path, MAGIC)
    cfg = EncoderConfig.from_dict(meta["encoder_config"])
    mel = MelConfig.from_dict(meta["mel_config"])

    def enc(name):
        return Tensor(blocks[f"encoder/{name}"].astype(np.float64))

    block_params = [BlockParams(
        w_agg=enc(f"block{i}.w_agg"), w_out=enc(f"block{i}.w_out"),
        ffn_w1=enc(f"block{i}.ffn_w1"), ffn_b1=enc(f"block{i}.ffn_b1"),
        ffn_w2=enc(f"block{i}.ffn_w2"), ffn_b2=enc(f"block{i}.ffn_b2"),
    ) for i in range(cfg.n_blocks)]
    encoder_params = EncoderParams(
        patch_w=enc("patch.w"), patch_b=enc("patch.b"), blocks=block_params,
        proj_w1=enc("proj.w1"), proj_b1=enc("proj.b1"),
        proj_w2=enc("proj.w2"), proj_b2=enc("proj.b2"), config=cfg,
    )

    classifier_params = None
    if meta.get("has_classifier"):
        def clf(name):
            return Tensor(blocks[f"classifier/{name}"].astype(np.float64))

        classifier_params = MhcaParams(
            w_q=clf("mhca.w_q"), w_k=clf("mhca.w_k"), w_v=clf("mhca.w_v"),
            w_o=clf("mhca.w_o"), w=clf("mhca.w"), b=clf("mhca.b"),
        )
    return encoder_params, classifier_params, mel, meta
