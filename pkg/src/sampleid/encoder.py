"""Graph-neural-network fingerprint encoder.

A spectrogram becomes a set of (time, frequency, amplitude) points; fixed
overlapping patches of the point grid are embedded into node vectors; a
stack of blocks then alternates dynamic kNN-graph construction, residual
graph convolution, and a residual feed-forward update.  The refined nodes
form the node embedding matrix; their mean is projected and L2-normalized
into the fingerprint used for similarity search.

Patch geometry: patch windows of `patch_window` cells are placed on a
`patch_grid` lattice whose start positions are rounded linspace over the
valid range, so windows overlap and jointly cover the grid.  Each patch
is flattened channel-major ([t..., f..., amp...]) before the embedding
affine.  kNN edges are recomputed from the current node values at the
start of every block and are constants with respect to differentiation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .audio import MelSpec
from .autodiff import Tensor


@dataclass
class EncoderConfig:
    patch_grid: tuple[int, int] = (8, 4)       # (freq, time) patch counts; N = product
    patch_window: tuple[int, int] = (16, 14)   # (freq, time) cells per patch; p = product
    embed_dim: int = 512
    node_dim: int = 512
    n_blocks: int = 4
    k: int = 8
    fp_dim: int = 128
    ffn_hidden: int = 1024
    proj_hidden: int = 512
    agg: str = "max"

    def __post_init__(self):
        if self.embed_dim != self.node_dim:
            # residual blocks preserve width, so the patch embedding must
            # already be node_dim wide
            raise ValueError("embed_dim must equal node_dim")
        if self.k >= self.node_count:
            raise ValueError(f"k={self.k} must be < node_count={self.node_count}")
        if self.agg not in ("max", "mean"):
            raise ValueError(f"agg must be 'max' or 'mean', got {self.agg!r}")
        if min(self.embed_dim, self.n_blocks, self.fp_dim,
               self.ffn_hidden, self.proj_hidden) < 1:
            raise ValueError("all dimensions must be >= 1")

    @property
    def node_count(self):
        return self.patch_grid[0] * self.patch_grid[1]

    @property
    def patch_size(self):
        return self.patch_window[0] * self.patch_window[1]

    @classmethod
    def tiny(cls):
        """Small preset for gradient checks and fast tests."""
        return cls(patch_grid=(4, 2), patch_window=(8, 6), embed_dim=16,
                   node_dim=16, n_blocks=2, k=3, fp_dim=8, ffn_hidden=32,
                   proj_hidden=16)

    @classmethod
    def toy(cls):
        """Desk-scale preset for the synthetic end-to-end run."""
        return cls(patch_grid=(4, 2), patch_window=(16, 14), embed_dim=64,
                   node_dim=64, n_blocks=2, k=3, fp_dim=32, ffn_hidden=128,
                   proj_hidden=64)

    def to_dict(self):
        return {
            "patch_grid": list(self.patch_grid),
            "patch_window": list(self.patch_window),
            "embed_dim": self.embed_dim,
            "node_dim": self.node_dim,
            "n_blocks": self.n_blocks,
            "k": self.k,
            "fp_dim": self.fp_dim,
            "ffn_hidden": self.ffn_hidden,
            "proj_hidden": self.proj_hidden,
            "agg": self.agg,
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["patch_grid"] = tuple(d["patch_grid"])
        d["patch_window"] = tuple(d["patch_window"])
        return cls(**d)


@dataclass
class PointSet:
    """(3, F*T) array of rows (time, frequency, amplitude); indices in [0, 1]."""

    points: np.ndarray
    n_freq: int
    n_time: int


@dataclass
class KnnGraph:
    """neighbours[i] lists the k most cosine-similar nodes to i, descending,
    ties broken toward the lower index; never contains i itself."""

    neighbours: np.ndarray


@dataclass
class NodeMatrix:
    rows: np.ndarray

    def __post_init__(self):
        self.rows = np.asarray(self.rows)
        if self.rows.ndim != 2:
            raise ValueError("NodeMatrix must be 2-D")
        if not np.isfinite(self.rows).all():
            raise ValueError("non-finite node embeddings")


@dataclass
class Fingerprint:
    vec: np.ndarray

    def __post_init__(self):
        self.vec = np.asarray(self.vec)
        norm = float(np.linalg.norm(self.vec))
        if abs(norm - 1.0) > 1e-5:
            raise ValueError(f"fingerprint not unit-norm: {norm}")


def to_points(spec: MelSpec) -> PointSet:
    values = np.asarray(spec.values, dtype=np.float64)
    F, T = values.shape
    f_idx, t_idx = np.meshgrid(np.arange(F), np.arange(T), indexing="ij")
    t_norm = t_idx.reshape(-1) / max(T - 1, 1)
    f_norm = f_idx.reshape(-1) / max(F - 1, 1)
    pts = np.stack([t_norm, f_norm, values.reshape(-1)])
    return PointSet(points=pts, n_freq=F, n_time=T)


def patch_indices(n_freq, n_time, cfg: EncoderConfig):
    """Flat cell indices (N, p) of each patch window; cells are row-major
    over (freq, time).  Deterministic given shapes and config."""
    nf, nt = cfg.patch_grid
    wf, wt = cfg.patch_window
    if wf > n_freq or wt > n_time:
        raise ValueError(
            f"patch window {cfg.patch_window} exceeds grid ({n_freq}, {n_time})"
        )
    f_starts = np.round(np.linspace(0, n_freq - wf, nf)).astype(int)
    t_starts = np.round(np.linspace(0, n_time - wt, nt)).astype(int)
    df, dt = np.meshgrid(np.arange(wf), np.arange(wt), indexing="ij")
    window = (df * n_time + dt).reshape(-1)
    out = np.empty((nf * nt, wf * wt), dtype=np.int64)
    n = 0
    for fs in f_starts:
        for ts in t_starts:
            out[n] = window + fs * n_time + ts
            n += 1
    return out


def patch_matrix(pts: PointSet, cfg: EncoderConfig):
    """Constant (N, 3p) input to the patch embedding, channel-major per patch."""
    idx = patch_indices(pts.n_freq, pts.n_time, cfg)
    gathered = pts.points[:, idx]                  # (3, N, p)
    return np.ascontiguousarray(gathered.transpose(1, 0, 2).reshape(idx.shape[0], -1))


@dataclass
class BlockParams:
    w_agg: Tensor
    w_out: Tensor
    ffn_w1: Tensor
    ffn_b1: Tensor
    ffn_w2: Tensor
    ffn_b2: Tensor


@dataclass
class EncoderParams:
    patch_w: Tensor
    patch_b: Tensor
    blocks: list[BlockParams]
    proj_w1: Tensor
    proj_b1: Tensor
    proj_w2: Tensor
    proj_b2: Tensor
    config: EncoderConfig = field(default_factory=EncoderConfig)

    @classmethod
    def init(cls, cfg: EncoderConfig, rng, dtype=np.float64):
        d = cfg.node_dim

        def he(shape, fan_in):
            return Tensor((rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype))

        def zeros(shape):
            return Tensor(np.zeros(shape, dtype=dtype))

        blocks = []
        for _ in range(cfg.n_blocks):
            blocks.append(BlockParams(
                w_agg=he((d, d), d),
                w_out=he((d, d), d),
                ffn_w1=he((d, cfg.ffn_hidden), d),
                ffn_b1=zeros(cfg.ffn_hidden),
                ffn_w2=he((cfg.ffn_hidden, d), cfg.ffn_hidden),
                ffn_b2=zeros(d),
            ))
        return cls(
            patch_w=he((3 * cfg.patch_size, d), 3 * cfg.patch_size),
            patch_b=zeros(d),
            blocks=blocks,
            proj_w1=he((d, cfg.proj_hidden), d),
            proj_b1=zeros(cfg.proj_hidden),
            proj_w2=Tensor((rng.standard_normal((cfg.proj_hidden, cfg.fp_dim))
                            * np.sqrt(1.0 / cfg.proj_hidden)).astype(dtype)),
            proj_b2=zeros(cfg.fp_dim),
            config=cfg,
        )

    def named(self) -> dict[str, Tensor]:
        out = {"patch.w": self.patch_w, "patch.b": self.patch_b}
        for i, b in enumerate(self.blocks):
            out[f"block{i}.w_agg"] = b.w_agg
            out[f"block{i}.w_out"] = b.w_out
            out[f"block{i}.ffn_w1"] = b.ffn_w1
            out[f"block{i}.ffn_b1"] = b.ffn_b1
            out[f"block{i}.ffn_w2"] = b.ffn_w2
            out[f"block{i}.ffn_b2"] = b.ffn_b2
        out["proj.w1"] = self.proj_w1
        out["proj.b1"] = self.proj_b1
        out["proj.w2"] = self.proj_w2
        out["proj.b2"] = self.proj_b2
        return out

    def copy(self, dtype=None):
        named = self.named()
        clone = {k: Tensor(v.data.astype(dtype or v.data.dtype)) for k, v in named.items()}
        blocks = [BlockParams(
            w_agg=clone[f"block{i}.w_agg"], w_out=clone[f"block{i}.w_out"],
            ffn_w1=clone[f"block{i}.ffn_w1"], ffn_b1=clone[f"block{i}.ffn_b1"],
            ffn_w2=clone[f"block{i}.ffn_w2"], ffn_b2=clone[f"block{i}.ffn_b2"],
        ) for i in range(len(self.blocks))]
        return EncoderParams(
            patch_w=clone["patch.w"], patch_b=clone["patch.b"], blocks=blocks,
            proj_w1=clone["proj.w1"], proj_b1=clone["proj.b1"],
            proj_w2=clone["proj.w2"], proj_b2=clone["proj.b2"], config=self.config,
        )


def build_knn_graph(nodes, k) -> KnnGraph:
    nodes = np.asarray(nodes, dtype=np.float64)
    n = nodes.shape[0]
    if k >= n:
        raise ValueError(f"k={k} must be < node count {n}")
    norms = np.linalg.norm(nodes, axis=1)
    safe = nodes / np.maximum(norms, 1e-12)[:, None]
    sims = safe @ safe.T
    np.fill_diagonal(sims, -np.inf)
    neigh = np.empty((n, k), dtype=np.int64)
    order_idx = np.arange(n)
    for i in range(n):
        # descending similarity, ties toward the lower index
        order = np.lexsort((order_idx, -sims[i]))
        neigh[i] = order[:k]
    return KnnGraph(neighbours=neigh)


def graph_conv(nodes: Tensor, graph: KnnGraph, block: BlockParams, agg="max") -> Tensor:
    """Residual neighbourhood update: x_i + relu(AGG_j(x_j W_agg) W_out)."""
    if graph.neighbours.max(initial=-1) >= nodes.data.shape[0]:
        raise ValueError("graph references missing nodes")
    h = nodes @ block.w_agg
    gathered = ad.gather_rows(h, graph.neighbours)        # (N, k, d)
    if agg == "max":
        pooled = ad.tmax(gathered, axis=1)
    else:
        pooled = ad.tmean(gathered, axis=1)
    return nodes + ad.relu(pooled @ block.w_out)


def ffn(nodes: Tensor, block: BlockParams) -> Tensor:
    hidden = ad.relu(nodes @ block.ffn_w1 + block.ffn_b1)
    return nodes + (hidden @ block.ffn_w2 + block.ffn_b2)


def encoder_forward_t(spec: MelSpec, params: EncoderParams, cfg: EncoderConfig,
                      frozen_graphs=None):
    """Differentiable forward pass.

    Returns (node Tensor (N, d_n), fingerprint Tensor (1, fp_dim), graphs).
    `frozen_graphs` pins the kNN edges, which finite-difference checks need
    since edge selection is discrete.
    """
    pts = to_points(spec)
    patches = patch_matrix(pts, cfg).astype(params.patch_w.data.dtype)
    x = ad.relu(Tensor(patches) @ params.patch_w + params.patch_b)

    graphs = []
    for i, block in enumerate(params.blocks):
        graph = frozen_graphs[i] if frozen_graphs is not None else build_knn_graph(x.data, cfg.k)
        graphs.append(graph)
        x = graph_conv(x, graph, block, agg=cfg.agg)
        x = ffn(x, block)

    pooled = ad.tmean(x, axis=0, keepdims=True)           # (1, d_n)
    hidden = ad.relu(pooled @ params.proj_w1 + params.proj_b1)
    raw = hidden @ params.proj_w2 + params.proj_b2        # (1, fp_dim)
    fp = ad.l2_normalize(raw, axis=-1)
    return x, fp, graphs


def encoder_forward(spec: MelSpec, params: EncoderParams,
                    cfg: EncoderConfig | None = None):
    """Inference entry point: MelSpec -> (NodeMatrix, Fingerprint)."""
    cfg = cfg or params.config
    nodes, fp, _ = encoder_forward_t(spec, params, cfg)
    return NodeMatrix(nodes.data.copy()), Fingerprint(fp.data.reshape(-1).copy())
