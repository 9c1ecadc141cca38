"""Multi-head cross-attention match classifier.

Queries come from one segment's node embedding matrix, keys and values
from the other's.  Heads use scaled dot-product attention (1/sqrt(d_head)),
are concatenated and output-projected, mean-pooled over nodes, and mapped
through a single affine + sigmoid to a match confidence in (0, 1).
Projections carry no biases; only the final scalar layer has one.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoder import NodeMatrix


@dataclass
class MhcaParams:
    w_q: Tensor  # (h, d_n, d_h)
    w_k: Tensor  # (h, d_n, d_h)
    w_v: Tensor  # (h, d_n, d_h)
    w_o: Tensor  # (d_n, d_n)
    w: Tensor    # (d_n,)
    b: Tensor    # scalar

    @property
    def n_heads(self):
        return self.w_q.data.shape[0]

    @property
    def node_dim(self):
        return self.w_q.data.shape[1]

    @classmethod
    def init(cls, node_dim, n_heads=8, rng=None, dtype=np.float64):
        if node_dim % n_heads != 0:
            raise ValueError(f"node_dim {node_dim} not divisible by n_heads {n_heads}")
        rng = rng or np.random.default_rng(0)
        d_h = node_dim // n_heads

        def proj():
            scale = np.sqrt(1.0 / node_dim)
            return Tensor((rng.standard_normal((n_heads, node_dim, d_h)) * scale).astype(dtype))

        return cls(
            w_q=proj(), w_k=proj(), w_v=proj(),
            w_o=Tensor((rng.standard_normal((node_dim, node_dim))
                        * np.sqrt(1.0 / node_dim)).astype(dtype)),
            w=Tensor((rng.standard_normal(node_dim) * np.sqrt(1.0 / node_dim)).astype(dtype)),
            b=Tensor(np.zeros((), dtype=dtype)),
        )

    def named(self) -> dict[str, Tensor]:
        return {"mhca.w_q": self.w_q, "mhca.w_k": self.w_k, "mhca.w_v": self.w_v,
                "mhca.w_o": self.w_o, "mhca.w": self.w, "mhca.b": self.b}

    def copy(self, dtype=None):
        t = {k: Tensor(v.data.astype(dtype or v.data.dtype)) for k, v in self.named().items()}
        return MhcaParams(w_q=t["mhca.w_q"], w_k=t["mhca.w_k"], w_v=t["mhca.w_v"],
                          w_o=t["mhca.w_o"], w=t["mhca.w"], b=t["mhca.b"])


def _as_tensor_2d(m):
    if isinstance(m, Tensor):
        return m
    if isinstance(m, NodeMatrix):
        return Tensor(np.asarray(m.rows, dtype=np.float64))
    return Tensor(np.asarray(m, dtype=np.float64))


def cross_attention_t(q, r, params: MhcaParams) -> Tensor:
    q, r = _as_tensor_2d(q), _as_tensor_2d(r)
    if q.data.shape != r.data.shape or q.data.ndim != 2:
        raise ValueError(f"shape mismatch: {q.data.shape} vs {r.data.shape}")
    if q.data.shape[1] != params.node_dim:
        raise ValueError(
            f"node dim {q.data.shape[1]} does not match params ({params.node_dim})"
        )
    d_h = params.node_dim // params.n_heads
    n = q.data.shape[0]

    qh = q @ params.w_q                       # (h, N, d_h)
    kh = r @ params.w_k
    vh = r @ params.w_v
    logits = (qh @ ad.transpose(kh, (0, 2, 1))) * (1.0 / np.sqrt(d_h))
    attn = ad.softmax(logits, axis=-1)        # (h, N, N), rows sum to 1
    heads = attn @ vh                         # (h, N, d_h)
    merged = ad.reshape(ad.transpose(heads, (1, 0, 2)), (n, params.node_dim))
    return merged @ params.w_o


def classify_t(q, r, params: MhcaParams) -> Tensor:
    context = cross_attention_t(q, r, params)
    pooled = ad.tmean(context, axis=0, keepdims=True)            # (1, d_n)
    d = params.node_dim
    logit = pooled @ ad.reshape(params.w, (d, 1)) + params.b     # (1, 1)
    return ad.sigmoid(logit)


def cross_attention(q, r, params: MhcaParams) -> np.ndarray:
    return cross_attention_t(q, r, params).data.copy()


def classify(q, r, params: MhcaParams) -> float:
    """Match confidence in (0, 1) for query/reference node matrices."""
    return float(classify_t(q, r, params).data.reshape(()))
