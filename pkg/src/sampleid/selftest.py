"""Built-in invariant suite over synthetic data, for `sampleid selftest`.

Every check is deterministic given the seed; the report dict is stable
byte-for-byte across runs except for the timestamp field.
"""

from __future__ import annotations

import time

import numpy as np

from .audio import MelConfig, Waveform, mel_spectrogram, segment
from .autodiff import Tensor, grad_check
from .classifier import MhcaParams, classify, classify_t, cross_attention
from .encoder import (EncoderConfig, EncoderParams, build_knn_graph,
                      encoder_forward)
from .evaluation import average_precision
from .index import IvfPqConfig, IvfPqIndex
from .pairgen import AugRanges, aug1, generate_pair
from .retrieval import (Candidate, ReferenceDb, RetrievalResult, SegmentRecord,
                        SongRecord, refine_and_rank)
from .synth import make_toy_track
from .training import nt_xent_loss

_CHECKS = []


def _check(name):
    def wrap(fn):
        _CHECKS.append((name, fn))
        return fn
    return wrap


@_check("segment_count_formula")
def _segments(seed):
    sr = 16_000
    cfg = MelConfig()
    w = Waveform(np.zeros(10 * sr, dtype=np.float32), sr)
    got = len(segment(w, cfg))
    return got == 13, f"10s -> {got} windows"


@_check("mel_silence_floor_and_determinism")
def _mel(seed):
    cfg = MelConfig()
    w = Waveform(np.zeros(64_000, dtype=np.float32), 16_000)
    a = mel_spectrogram(w, cfg).values
    b = mel_spectrogram(w, cfg).values
    floor = np.log(cfg.log_floor)
    ok = (a.shape == (64, 32) and np.allclose(a, floor, atol=1e-6)
          and np.array_equal(a, b))
    return ok, f"shape {a.shape}, min {a.min():.4f}"


@_check("encoder_shapes_and_norm")
def _encoder(seed):
    rng = np.random.default_rng(seed)
    cfg = EncoderConfig.tiny()
    params = EncoderParams.init(cfg, rng)
    spec = mel_spectrogram(
        Waveform(rng.standard_normal(64_000).astype(np.float32) * 0.1, 16_000),
        MelConfig())
    nm, fp = encoder_forward(spec, params)
    ok = (nm.rows.shape == (cfg.node_count, cfg.node_dim)
          and fp.vec.shape == (cfg.fp_dim,)
          and abs(np.linalg.norm(fp.vec) - 1.0) < 1e-6)
    return ok, f"nodes {nm.rows.shape}, |fp| = {np.linalg.norm(fp.vec):.8f}"


@_check("residual_identity_with_zero_blocks")
def _residual(seed):
    rng = np.random.default_rng(seed)
    cfg = EncoderConfig.tiny()
    params = EncoderParams.init(cfg, rng)
    for block in params.blocks:
        for t in (block.w_agg, block.w_out, block.ffn_w1, block.ffn_b1,
                  block.ffn_w2, block.ffn_b2):
            t.data[...] = 0.0
    spec = mel_spectrogram(
        Waveform(rng.standard_normal(64_000).astype(np.float32) * 0.1, 16_000),
        MelConfig())
    from .encoder import patch_matrix, to_points
    import sampleid.autodiff as ad
    nm, _ = encoder_forward(spec, params)
    patches = patch_matrix(to_points(spec), cfg)
    expected = np.maximum(patches @ params.patch_w.data + params.patch_b.data, 0.0)
    ok = np.allclose(nm.rows, expected, atol=1e-12)
    return ok, "node matrix equals patch embeddings"


@_check("knn_graph_validity")
def _knn(seed):
    rng = np.random.default_rng(seed)
    nodes = rng.standard_normal((12, 6))
    g = build_knn_graph(nodes, 4)
    rows_ok = all(
        len(set(g.neighbours[i])) == 4 and i not in g.neighbours[i]
        for i in range(12)
    )
    return rows_ok, "no self loops, k distinct neighbours"


@_check("nt_xent_closed_forms")
def _ntxent(seed):
    e = np.eye(4)
    z_q = np.stack([e[0], e[1]])
    z_r = np.stack([e[0], e[1]])
    loss, _, _ = nt_xent_loss(z_q, z_r, 0.05)
    expected = -np.log(np.exp(20.0) / (np.exp(20.0) + 2.0))
    same = np.tile(e[0], (3, 1))
    loss2, _, _ = nt_xent_loss(same, same, 0.05)
    ok = abs(loss - expected) < 1e-9 and abs(loss2 - np.log(5.0)) < 1e-9
    return ok, f"orthogonal {loss:.3e} vs {expected:.3e}; identical {loss2:.6f}"


@_check("classifier_contracts")
def _clf(seed):
    rng = np.random.default_rng(seed)
    params = MhcaParams.init(8, n_heads=2, rng=rng)
    q = rng.standard_normal((4, 8))
    r = rng.standard_normal((4, 8))
    s = classify(q, r, params)
    params0 = MhcaParams.init(8, n_heads=2, rng=np.random.default_rng(seed))
    params0.w.data[...] = 0.0
    params0.b.data[...] = 0.0
    half = classify(q, r, params0)
    ok = 0.0 < s < 1.0 and abs(half - 0.5) < 1e-12
    return ok, f"s = {s:.4f}; zero-head -> {half}"


@_check("classifier_gradients")
def _clf_grad(seed):
    rng = np.random.default_rng(seed)
    params = MhcaParams.init(8, n_heads=2, rng=rng)
    q = Tensor(rng.standard_normal((3, 8)))
    r = Tensor(rng.standard_normal((3, 8)))
    blocks = dict(params.named())
    blocks["input.q"] = q
    blocks["input.r"] = r
    report = grad_check(lambda: classify_t(q, r, params), blocks,
                        tol=1e-4, max_coords=8, rng=np.random.default_rng(seed))
    return report.passed, f"max rel err {report.max_rel_err:.2e}"


@_check("ivfpq_roundtrip_and_singleton")
def _index(seed):
    rng = np.random.default_rng(seed)
    vecs = rng.standard_normal((64, 16))
    vecs /= np.linalg.norm(vecs, axis=1, keepdims=True)
    cfg = IvfPqConfig(dim=16, nlist=4, m=4, nbits=4, nprobe=4, seed=seed)
    idx = IvfPqIndex.train(np.tile(vecs, (2, 1)), cfg)
    idx.add(7, vecs[0])
    hits = idx.search(vecs[0], topk=1, nprobe=4)
    ok = hits and hits[0][0] == 7
    idx2 = IvfPqIndex.train(np.tile(vecs, (2, 1)), cfg)
    ok = ok and np.array_equal(idx.centroids, idx2.centroids)
    return bool(ok), f"singleton rank-1 id {hits[0][0]}, deterministic retrain"


@_check("map_closed_form")
def _map(seed):
    ap = average_precision(["a", "x", "b", "y"], {"a", "b"})
    return abs(ap - (1.0 + 2.0 / 3.0) / 2.0) < 1e-12, f"AP = {ap:.6f}"


@_check("aggregation_semantics")
def _agg(seed):
    # each stored segment's nodes carry its intended classifier score in
    # cell [0, 0]; the stub scorer just reads it back
    db = ReferenceDb()
    for song, scores in (("A", [0.9]), ("B", [0.6, 0.6]), ("C", [0.49])):
        rec = SongRecord(song_id=song, title=song)
        for i, s in enumerate(scores):
            vec_id = db.segment_count
            nodes = np.full((2, 4), s)
            rec.segments.append(SegmentRecord(offset=float(i), fingerprint=np.zeros(4),
                                              nodes=nodes))
            db.id_map[vec_id] = (song, i)
        db.songs[song] = rec
    from .encoder import NodeMatrix
    cands = [Candidate(song_id=db.id_map[v][0], vec_id=v,
                       offset=float(db.id_map[v][1]), ann_score=1.0)
             for v in range(db.segment_count)]
    result = refine_and_rank([NodeMatrix(np.zeros((2, 4)))], cands, db,
                             scorer=lambda q, r: float(r.rows[0, 0]))
    order = [r.song_id for r in result.ranked]
    scores = [r.p_song for r in result.ranked]
    ok = (order == ["B", "A"]
          and abs(scores[0] - 1.2) < 1e-12 and abs(scores[1] - 0.9) < 1e-12)
    return ok, f"ranking {order}, scores {[round(s, 3) for s in scores]}"


@_check("pairgen_determinism_and_gain")
def _pairgen(seed):
    track = make_toy_track(0, duration=6.0)
    rng1 = np.random.default_rng(seed)
    rng2 = np.random.default_rng(seed)
    p1 = generate_pair(track, 0.5, 4.0, AugRanges(), rng1)
    p2 = generate_pair(track, 0.5, 4.0, AugRanges(), rng2)
    same = (np.array_equal(p1.x_q.samples, p2.x_q.samples)
            and np.array_equal(p1.x_r.samples, p2.x_r.samples))
    w = Waveform(np.ones(1000, dtype=np.float32) * 0.25, 16_000)
    doubled = aug1(w, 0.0, 6.0206)
    gain_ok = np.allclose(doubled.samples, 0.5, atol=1e-6)
    return same and gain_ok, "bit-identical pairs; +6.0206 dB doubles"


def run_selftest(seed=0):
    """Run every check; returns a JSON-able report dict."""
    checks = []
    all_ok = True
    for name, fn in _CHECKS:
        try:
            ok, detail = fn(seed)
        except Exception as e:  # a crash is a failure, not an abort
            ok, detail = False, f"exception: {e}"
        checks.append({"name": name, "passed": bool(ok), "detail": str(detail)})
        all_ok = all_ok and ok
    return {
        "kind": "selftest",
        "seed": seed,
        "passed": bool(all_ok),
        "checks": checks,
        "timestamp": time.time(),
    }
