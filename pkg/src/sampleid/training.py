"""Losses, hard-negative mining, Adam, and the two training stages.

Stage 1 trains the encoder contrastively (NT-Xent over synthetic pairs,
cosine-annealed Adam, early stopping on held-out-track validation loss).
Stage 2 freezes the encoder and fits the cross-attention classifier with
BCE on batches of positives plus top-3 fingerprint-similar negatives per
positive (a fixed 1:3 label ratio).

Both stages draw every random decision from one seeded generator in a
fixed order, so runs are bit-reproducible in single-threaded mode.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .audio import MelConfig, mel_spectrogram
from .autodiff import Tensor, grad_check  # noqa: F401  (re-exported harness)
from .classifier import MhcaParams, classify_t
from .encoder import EncoderConfig, EncoderParams, encoder_forward, encoder_forward_t
from .pairgen import AugRanges, StemSet, generate_pair
from .weights import hash_params


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def nt_xent_loss_t(z_q: Tensor, z_r: Tensor, tau: float) -> Tensor:
    """NT-Xent over 2B views: anchor i's positive is its pair partner, its
    negatives are the remaining 2B - 2 embeddings; logits are cosine / tau
    (inputs are unit-norm); result is the mean cross-entropy over anchors."""
    if tau <= 0:
        raise ValueError("temperature must be positive")
    b = z_q.data.shape[0]
    if b < 2:
        raise ValueError("NT-Xent needs batch size >= 2 (no negatives otherwise)")
    z = ad.concat([z_q, z_r], axis=0)                       # (2B, d)
    sims = (z @ ad.transpose(z, (1, 0))) * (1.0 / tau)
    mask = np.full((2 * b, 2 * b), 0.0)
    np.fill_diagonal(mask, -1e15)                            # no self-pairing
    logits = sims + Tensor(mask)

    # log-softmax per row; composing through tmax yields the exact gradient
    row_max = ad.tmax(logits, axis=1, keepdims=True)
    lse = ad.log(ad.tsum(ad.exp(logits - row_max), axis=1, keepdims=True)) + row_max
    log_prob = logits - lse

    pos = np.zeros((2 * b, 2 * b))
    idx = np.arange(2 * b)
    pos[idx, (idx + b) % (2 * b)] = 1.0
    picked = ad.tsum(log_prob * Tensor(pos))
    return picked * (-1.0 / (2 * b))


def nt_xent_loss(z_q, z_r, tau):
    """Array-level contract: returns (loss, grad_z_q, grad_z_r)."""
    tq = Tensor(np.asarray(z_q, dtype=np.float64))
    tr = Tensor(np.asarray(z_r, dtype=np.float64))
    loss = nt_xent_loss_t(tq, tr, tau)
    loss.backward()
    return float(loss.data), tq.grad.copy(), tr.grad.copy()


def bce_loss(p, y):
    """Binary cross-entropy with its analytic d(loss)/dp.

    p is clamped to [1e-7, 1 - 1e-7] before the logs; y must be 0 or 1.
    """
    if y not in (0, 1):
        raise ValueError("label must be 0 or 1")
    eps = 1e-7
    p = min(max(float(p), eps), 1.0 - eps)
    loss = -(y * np.log(p) + (1 - y) * np.log(1.0 - p))
    grad = (p - y) / (p * (1.0 - p))
    return float(loss), float(grad)


def bce_loss_t(p: Tensor, y: float, eps=1e-12) -> Tensor:
    if y == 1:
        return -ad.log(p + eps)
    return -ad.log((1.0 - p) + eps)


# ---------------------------------------------------------------------------
# Hard-negative mining
# ---------------------------------------------------------------------------


def mine_hard_negative_indices(z_q, z_r, n_neg=3) -> np.ndarray:
    """For each query i, the n_neg reference indices j != i with the highest
    fingerprint similarity z_q[i] . z_r[j], descending, ties to lower j."""
    z_q = np.asarray(z_q, dtype=np.float64)
    z_r = np.asarray(z_r, dtype=np.float64)
    b = z_q.shape[0]
    if b < n_neg + 1:
        raise ValueError(f"batch of {b} cannot supply {n_neg} negatives per row")
    sims = z_q @ z_r.T
    np.fill_diagonal(sims, -np.inf)
    out = np.empty((b, n_neg), dtype=np.int64)
    cols = np.arange(b)
    for i in range(b):
        order = np.lexsort((cols, -sims[i]))
        out[i] = order[:n_neg]
    return out


def mine_hard_negatives(queries, references, z_q, z_r, n_neg=3):
    """(query NodeMatrix, reference NodeMatrix) pairs for the mined indices."""
    idx = mine_hard_negative_indices(z_q, z_r, n_neg)
    return [(queries[i], references[j]) for i in range(idx.shape[0]) for j in idx[i]]


# ---------------------------------------------------------------------------
# Optimizer and schedule
# ---------------------------------------------------------------------------


class Adam:
    def __init__(self, params: dict[str, Tensor], lr=1e-3,
                 beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(v.data) for k, v in params.items()}
        self.v = {k: np.zeros_like(v.data) for k, v in params.items()}
        self.t = 0

    def step(self, lr=None):
        lr = self.lr if lr is None else lr
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            m_hat = self.m[name] / b1c
            v_hat = self.v[name] / b2c
            p.data -= lr * m_hat / (np.sqrt(v_hat) + self.eps)


def cosine_lr(step, total_steps, lr_max, lr_min=0.0):
    """Cosine annealing from lr_max to lr_min over total_steps."""
    if total_steps <= 0:
        return lr_max
    frac = min(max(step / total_steps, 0.0), 1.0)
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + np.cos(np.pi * frac))


# ---------------------------------------------------------------------------
# Stage 1: contrastive encoder training
# ---------------------------------------------------------------------------


@dataclass
class EncoderTrainConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    mel: MelConfig = field(default_factory=MelConfig)
    aug: AugRanges = field(default_factory=AugRanges)
    batch_size: int = 64
    epochs: int = 10
    steps_per_epoch: int = 20
    tau: float = 0.05
    lr_max: float = 1e-3
    lr_min: float = 1e-5
    val_fraction: float = 0.1
    patience: int = 10
    seed: int = 0


def _sample_pair_batch(tracks, count, cfg, rng):
    """Generate `count` pairs and return their mel specs as two lists."""
    specs_q, specs_r = [], []
    delta_t = cfg.mel.window_seconds
    headroom = 0.25
    for _ in range(count):
        track = tracks[int(rng.integers(0, len(tracks)))]
        t_max = track.duration - delta_t - headroom
        if t_max < 0:
            raise ValueError(f"track {track.track_id} shorter than one segment")
        t = float(rng.uniform(0.0, t_max))
        pair = generate_pair(track, t, delta_t, cfg.aug, rng)
        specs_q.append(mel_spectrogram(pair.x_q, cfg.mel))
        specs_r.append(mel_spectrogram(pair.x_r, cfg.mel))
    return specs_q, specs_r


def _batch_fingerprints_t(specs, params, cfg):
    fps = [encoder_forward_t(s, params, cfg)[1] for s in specs]
    return ad.concat(fps, axis=0)


@dataclass
class TrainHistory:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    best_epoch: int = -1


def train_encoder(tracks: list[StemSet], cfg: EncoderTrainConfig):
    """Returns (best EncoderParams, TrainHistory)."""
    if len(tracks) < 2:
        raise ValueError("need at least 2 training tracks")
    rng = np.random.default_rng(cfg.seed)
    order = rng.permutation(len(tracks))
    n_val = max(1, int(round(cfg.val_fraction * len(tracks))))
    val_tracks = [tracks[i] for i in order[:n_val]]
    train_tracks = [tracks[i] for i in order[n_val:]]
    if not train_tracks:
        raise ValueError("validation split consumed every track")

    params = EncoderParams.init(cfg.encoder, rng, dtype=np.float64)
    opt = Adam(params.named())
    total_steps = cfg.epochs * cfg.steps_per_epoch
    history = TrainHistory()
    best = params.copy()
    best_val = np.inf
    stale = 0
    step = 0

    for epoch in range(cfg.epochs):
        epoch_losses = []
        for _ in range(cfg.steps_per_epoch):
            specs_q, specs_r = _sample_pair_batch(train_tracks, cfg.batch_size, cfg, rng)
            z_q = _batch_fingerprints_t(specs_q, params, cfg.encoder)
            z_r = _batch_fingerprints_t(specs_r, params, cfg.encoder)
            loss = nt_xent_loss_t(z_q, z_r, cfg.tau)
            if not np.isfinite(loss.data):
                raise RuntimeError(
                    f"training diverged: non-finite loss at step {step}"
                )
            loss.backward()
            opt.step(lr=cosine_lr(step, total_steps, cfg.lr_max, cfg.lr_min))
            epoch_losses.append(float(loss.data))
            step += 1
        history.train_loss.append(float(np.mean(epoch_losses)))

        val_rng = np.random.default_rng((cfg.seed, 0x5EED, epoch))
        specs_q, specs_r = _sample_pair_batch(
            val_tracks, max(2, min(cfg.batch_size, 8)), cfg, val_rng)
        z_q = _batch_fingerprints_t(specs_q, params, cfg.encoder)
        z_r = _batch_fingerprints_t(specs_r, params, cfg.encoder)
        val = float(nt_xent_loss_t(z_q, z_r, cfg.tau).data)
        history.val_loss.append(val)

        if val < best_val:
            best_val = val
            best = params.copy()
            history.best_epoch = epoch
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    return best, history


# ---------------------------------------------------------------------------
# Stage 2: classifier training on a frozen encoder
# ---------------------------------------------------------------------------


@dataclass
class ClassifierTrainConfig:
    mel: MelConfig = field(default_factory=MelConfig)
    aug: AugRanges = field(default_factory=AugRanges)
    batch_size: int = 32          # positives per batch; negatives are 3x
    epochs: int = 5
    steps_per_epoch: int = 10
    n_heads: int = 8
    lr: float = 1e-3
    n_negatives: int = 3
    seed: int = 0


def train_classifier(tracks: list[StemSet], encoder_params: EncoderParams,
                     cfg: ClassifierTrainConfig):
    """Returns (MhcaParams, history of mean batch losses).

    The encoder is never updated; a parameter hash asserts it."""
    if len(tracks) < 1:
        raise ValueError("need at least 1 track")
    enc_cfg = encoder_params.config
    frozen_hash = hash_params(encoder_params.named())

    rng = np.random.default_rng(cfg.seed)
    clf = MhcaParams.init(enc_cfg.node_dim, n_heads=cfg.n_heads, rng=rng)
    opt = Adam(clf.named(), lr=cfg.lr)
    losses = []

    wrapped = EncoderTrainConfig(encoder=enc_cfg, mel=cfg.mel, aug=cfg.aug)
    for _ in range(cfg.epochs):
        for _ in range(cfg.steps_per_epoch):
            specs_q, specs_r = _sample_pair_batch(tracks, cfg.batch_size, wrapped, rng)
            queries, references, z_q, z_r = [], [], [], []
            for sq, sr in zip(specs_q, specs_r):
                nm_q, fp_q = encoder_forward(sq, encoder_params)
                nm_r, fp_r = encoder_forward(sr, encoder_params)
                queries.append(nm_q)
                references.append(nm_r)
                z_q.append(fp_q.vec)
                z_r.append(fp_r.vec)
            neg_idx = mine_hard_negative_indices(
                np.array(z_q), np.array(z_r), cfg.n_negatives)

            terms = []
            for i in range(cfg.batch_size):
                terms.append(bce_loss_t(classify_t(queries[i], references[i], clf), 1))
                for j in neg_idx[i]:
                    terms.append(bce_loss_t(classify_t(queries[i], references[j], clf), 0))
            loss = ad.tsum(ad.concat([ad.reshape(t, (1,)) for t in terms], axis=0))
            loss = loss * (1.0 / len(terms))
            if not np.isfinite(loss.data):
                raise RuntimeError("classifier training diverged: non-finite loss")
            loss.backward()
            opt.step()
            losses.append(float(loss.data))

    if hash_params(encoder_params.named()) != frozen_hash:
        raise RuntimeError("encoder parameters changed during classifier training")
    return clf, losses


# ---------------------------------------------------------------------------
# Gradient verification suite
# ---------------------------------------------------------------------------


def gradient_suite(tol=1e-4, seed=0, max_coords=64):
    """grad_check every differentiable operation at a tiny configuration.

    Covers the patch embedding, graph convolution, FFN, projection head,
    multi-head cross-attention, classifier head, NT-Xent, and BCE, plus a
    composite encoder-through-NT-Xent pass with frozen kNN edges.  Returns
    {name: GradCheckReport}.
    """
    from .classifier import cross_attention_t
    from .encoder import (build_knn_graph, encoder_forward_t, ffn, graph_conv,
                          patch_matrix, to_points)
    from .audio import MelSpec

    rng = np.random.default_rng(seed)
    cfg = EncoderConfig.tiny()
    reports = {}

    def scalar(t):
        return ad.tsum(t)

    # patch embedding
    params = EncoderParams.init(cfg, rng)
    spec = MelSpec(rng.standard_normal((16, 8)).astype(np.float32))
    patches = Tensor(patch_matrix(to_points(spec), cfg))

    def f_patch():
        return scalar(ad.relu(patches @ params.patch_w + params.patch_b))

    reports["patch_embed"] = grad_check(
        f_patch, {"patch.w": params.patch_w, "patch.b": params.patch_b},
        tol=tol, max_coords=max_coords, rng=np.random.default_rng(seed + 1))

    # graph convolution (max and mean aggregation)
    nodes = Tensor(rng.standard_normal((cfg.node_count, cfg.node_dim)))
    graph = build_knn_graph(nodes.data, cfg.k)
    block = params.blocks[0]
    for agg in ("max", "mean"):
        reports[f"graph_conv_{agg}"] = grad_check(
            lambda agg=agg: scalar(graph_conv(nodes, graph, block, agg=agg)),
            {"w_agg": block.w_agg, "w_out": block.w_out, "nodes": nodes},
            tol=tol, max_coords=max_coords, rng=np.random.default_rng(seed + 2))

    # FFN
    reports["ffn"] = grad_check(
        lambda: scalar(ffn(nodes, block)),
        {"ffn_w1": block.ffn_w1, "ffn_b1": block.ffn_b1,
         "ffn_w2": block.ffn_w2, "ffn_b2": block.ffn_b2, "nodes": nodes},
        tol=tol, max_coords=max_coords, rng=np.random.default_rng(seed + 3))

    # projection head (mean pool -> affine -> relu -> affine -> normalize);
    # a fixed random mix vector keeps the normalized output's gradient rich
    proj_mix = np.random.default_rng(seed + 4).standard_normal((1, cfg.fp_dim))

    def f_proj():
        pooled = ad.tmean(nodes, axis=0, keepdims=True)
        hidden = ad.relu(pooled @ params.proj_w1 + params.proj_b1)
        raw = hidden @ params.proj_w2 + params.proj_b2
        return scalar(ad.l2_normalize(raw, axis=-1) * Tensor(proj_mix))

    reports["projection"] = grad_check(
        f_proj, {"proj.w1": params.proj_w1, "proj.b1": params.proj_b1,
                 "proj.w2": params.proj_w2, "proj.b2": params.proj_b2,
                 "nodes": nodes},
        tol=tol, max_coords=max_coords, rng=np.random.default_rng(seed + 4))

    # multi-head cross-attention and classifier head
    clf = MhcaParams.init(16, n_heads=2, rng=rng)
    q_in = Tensor(rng.standard_normal((5, 16)))
    r_in = Tensor(rng.standard_normal((5, 16)))
    mix = np.random.default_rng(seed + 5).standard_normal((5, 16))
    reports["mha"] = grad_check(
        lambda: scalar(cross_attention_t(q_in, r_in, clf) * Tensor(mix)),
        {**clf.named(), "input.q": q_in, "input.r": r_in},
        tol=tol, max_coords=max_coords, rng=np.random.default_rng(seed + 5))
    reports["classifier_head"] = grad_check(
        lambda: scalar(classify_t(q_in, r_in, clf)),
        {**clf.named(), "input.q": q_in, "input.r": r_in},
        tol=tol, max_coords=max_coords, rng=np.random.default_rng(seed + 6))

    # NT-Xent on raw embeddings
    z_q = Tensor(rng.standard_normal((4, cfg.fp_dim)))
    z_r = Tensor(rng.standard_normal((4, cfg.fp_dim)))
    reports["nt_xent"] = grad_check(
        lambda: nt_xent_loss_t(z_q, z_r, 0.5),
        {"z_q": z_q, "z_r": z_r},
        tol=tol, max_coords=max_coords, rng=np.random.default_rng(seed + 7))

    # BCE through a sigmoid score
    logit = Tensor(np.array([[0.37]]))
    reports["bce"] = grad_check(
        lambda: (bce_loss_t(ad.sigmoid(logit), 1)
                 + bce_loss_t(ad.sigmoid(logit), 0)) * 0.5,
        {"logit": logit},
        tol=tol, max_coords=max_coords, rng=np.random.default_rng(seed + 8))

    # composite: encoder -> fingerprints -> NT-Xent, edges frozen
    enc = EncoderParams.init(cfg, np.random.default_rng(seed + 9))
    specs = [MelSpec(np.random.default_rng(seed + 10 + i)
                     .standard_normal((16, 8)).astype(np.float32))
             for i in range(4)]
    frozen = [encoder_forward_t(s, enc, cfg)[2] for s in specs]

    def f_full():
        fps = [encoder_forward_t(s, enc, cfg, frozen_graphs=g)[1]
               for s, g in zip(specs, frozen)]
        zq = ad.concat(fps[:2], axis=0)
        zr = ad.concat(fps[2:], axis=0)
        return nt_xent_loss_t(zq, zr, 0.5)

    reports["encoder_nt_xent"] = grad_check(
        f_full, enc.named(), tol=tol, max_coords=max_coords,
        rng=np.random.default_rng(seed + 11))
    return reports


# ---------------------------------------------------------------------------
# Small evaluation helper
# ---------------------------------------------------------------------------


def auroc(scores, labels):
    """Area under the ROC curve by the rank statistic (ties averaged)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    if pos.size == 0 or neg.size == 0:
        raise ValueError("need both positive and negative examples")
    order = np.argsort(np.concatenate([pos, neg]), kind="stable")
    ranks = np.empty(order.size, dtype=np.float64)
    ranks[order] = np.arange(1, order.size + 1)
    merged = np.concatenate([pos, neg])
    for value in np.unique(merged):
        same = merged == value
        if same.sum() > 1:
            ranks[same] = ranks[same].mean()
    return (ranks[:pos.size].sum() - pos.size * (pos.size + 1) / 2.0) / (pos.size * neg.size)
