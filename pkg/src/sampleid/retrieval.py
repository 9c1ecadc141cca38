"""Two-stage retrieval: ANN candidate generation over fingerprints, then
cross-attention refinement with rejection and song-level aggregation.

Stage 1 segments the query, searches the index with each segment's
fingerprint, and unions the matches (deduplicated per reference segment,
keeping the best ANN score).  Stage 2 scores every surviving candidate
segment against the query's node matrices, takes the max over query
segments, rejects scores below the threshold (0.5 unless overridden),
sums per song, and ranks descending.  Ties order by higher best-segment
score, then lower song id.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .audio import MelConfig, Waveform, mel_spectrogram, segment
from .classifier import MhcaParams, classify
from .container import read_container, write_container
from .encoder import EncoderParams, NodeMatrix, encoder_forward
from .index import IvfPqConfig, IvfPqIndex, default_nlist

MAGIC = b"SIDB"


@dataclass
class SegmentRecord:
    offset: float
    fingerprint: np.ndarray
    nodes: np.ndarray


@dataclass
class SongRecord:
    song_id: str
    title: str
    segments: list[SegmentRecord] = field(default_factory=list)


class ReferenceDb:
    """Per-song segment records plus the global vector-id map shared with
    the ANN index (vector id = insertion row)."""

    def __init__(self, config_hash=""):
        self.songs: dict[str, SongRecord] = {}
        self.id_map: dict[int, tuple[str, int]] = {}   # vec id -> (song, seg idx)
        self.config_hash = config_hash

    @property
    def segment_count(self):
        return len(self.id_map)

    def resolve(self, vec_id):
        song_id, seg_idx = self.id_map[vec_id]
        rec = self.songs[song_id].segments[seg_idx]
        return song_id, rec

    def fingerprint_matrix(self):
        rows = [None] * self.segment_count
        for vec_id, (song_id, seg_idx) in self.id_map.items():
            rows[vec_id] = self.songs[song_id].segments[seg_idx].fingerprint
        return np.stack(rows) if rows else np.empty((0, 0))

    def save(self, path):
        song_meta = []
        fps, nodes, offsets = [], [], []
        ordered = sorted(self.id_map.items())
        for vec_id, (song_id, seg_idx) in ordered:
            rec = self.songs[song_id].segments[seg_idx]
            fps.append(rec.fingerprint)
            nodes.append(rec.nodes)
            offsets.append(rec.offset)
        for song_id, song in self.songs.items():
            song_meta.append({"song_id": song_id, "title": song.title,
                              "vec_ids": [v for v, (s, _) in ordered if s == song_id]})
        blocks = {
            "fingerprints": (np.stack(fps).astype(np.float32)
                             if fps else np.empty((0, 0), dtype=np.float32)),
            "nodes": (np.stack(nodes).astype(np.float32)
                      if nodes else np.empty((0, 0, 0), dtype=np.float32)),
            "offsets": np.asarray(offsets, dtype=np.float64),
        }
        meta = {"kind": "refdb", "config_hash": self.config_hash, "songs": song_meta}
        write_container(path, MAGIC, meta, blocks)

    @classmethod
    def load(cls, path):
        meta, blocks = read_container(path, MAGIC)
        db = cls(config_hash=meta.get("config_hash", ""))
        fps, nodes, offsets = blocks["fingerprints"], blocks["nodes"], blocks["offsets"]
        for song in meta["songs"]:
            record = SongRecord(song_id=song["song_id"], title=song["title"])
            db.songs[song["song_id"]] = record
            for seg_idx, vec_id in enumerate(song["vec_ids"]):
                record.segments.append(SegmentRecord(
                    offset=float(offsets[vec_id]),
                    fingerprint=fps[vec_id].astype(np.float64),
                    nodes=nodes[vec_id].astype(np.float64),
                ))
                db.id_map[int(vec_id)] = (song["song_id"], seg_idx)
        return db


def ingest_reference(db: ReferenceDb, song_id, title, wave: Waveform,
                     encoder_params: EncoderParams, mel_cfg: MelConfig,
                     index: IvfPqIndex | None = None):
    """Segment, encode, and store one reference song; optionally also add
    its fingerprints to an already-trained index."""
    if song_id in db.songs:
        raise ValueError(f"duplicate song {song_id!r}")
    song = SongRecord(song_id=song_id, title=title)
    windows = segment(wave, mel_cfg)
    for offset, window in windows:
        spec = mel_spectrogram(window, mel_cfg)
        nm, fp = encoder_forward(spec, encoder_params)
        vec_id = db.segment_count
        song.segments.append(SegmentRecord(offset=offset, fingerprint=fp.vec,
                                           nodes=nm.rows))
        db.id_map[vec_id] = (song_id, len(song.segments) - 1)
        if index is not None:
            index.add(vec_id, fp.vec, song_id=song_id, offset=offset)
    db.songs[song_id] = song
    return song


def build_index_from_db(db: ReferenceDb, cfg: IvfPqConfig | None = None,
                        config_hash="") -> IvfPqIndex:
    """Train an IVF-PQ index on the database fingerprints and add them all."""
    fps = db.fingerprint_matrix()
    if fps.size == 0:
        raise ValueError("empty database")
    if cfg is None:
        n = fps.shape[0]
        nlist = min(default_nlist(n), max(1, n // 8))
        cfg = IvfPqConfig(dim=fps.shape[1], nlist=max(1, nlist),
                          m=_default_m(fps.shape[1]),
                          nprobe=max(1, min(8, nlist)))
    train_set = fps
    needed = max(cfg.nlist, cfg.ksub) * 4
    if train_set.shape[0] < needed:
        # tile the sample; repeats are valid k-means input at desk scale
        reps = int(np.ceil(needed / train_set.shape[0]))
        train_set = np.tile(train_set, (reps, 1))
    idx = IvfPqIndex.train(train_set, cfg, config_hash=config_hash)
    for vec_id, (song_id, seg_idx) in sorted(db.id_map.items()):
        rec = db.songs[song_id].segments[seg_idx]
        idx.add(vec_id, rec.fingerprint, song_id=song_id, offset=rec.offset)
    return idx


def _default_m(dim):
    for m in (16, 8, 4, 2, 1):
        if dim % m == 0:
            return m
    return 1


@dataclass
class Candidate:
    song_id: str
    vec_id: int
    offset: float
    ann_score: float
    p_clf: float | None = None


@dataclass
class SongResult:
    song_id: str
    p_song: float
    segments: list[tuple[float, float]]   # (offset, p_clf), descending score


@dataclass
class RetrievalResult:
    ranked: list[SongResult]
    query_meta: dict = field(default_factory=dict)


def encode_query(wave: Waveform, encoder_params: EncoderParams, mel_cfg: MelConfig):
    """Query segments -> (fingerprints (S, fp_dim), node matrices list)."""
    fps, node_mats = [], []
    for offset, window in segment(wave, mel_cfg):
        spec = mel_spectrogram(window, mel_cfg)
        nm, fp = encoder_forward(spec, encoder_params)
        fps.append(fp.vec)
        node_mats.append(nm)
    return np.stack(fps), node_mats


def retrieve_candidates(query_fps, index: IvfPqIndex, db: ReferenceDb,
                        topk_per_segment=20, nprobe=None):
    """Union of per-segment ANN matches, deduplicated on the reference
    segment, keeping the maximum ANN score.  Sorted by vec id."""
    if index.size == 0:
        raise ValueError("empty index")
    best: dict[int, float] = {}
    for fp in np.atleast_2d(query_fps):
        for vec_id, score in index.search(fp, topk_per_segment, nprobe=nprobe):
            if vec_id not in best or score > best[vec_id]:
                best[vec_id] = score
    out = []
    for vec_id in sorted(best):
        song_id, rec = db.resolve(vec_id)
        out.append(Candidate(song_id=song_id, vec_id=vec_id, offset=rec.offset,
                             ann_score=best[vec_id]))
    return out


def make_scorer(params: MhcaParams):
    return lambda q_nodes, r_nodes: classify(q_nodes, r_nodes, params)


def refine_and_rank(query_nodes: list[NodeMatrix], candidates, db: ReferenceDb,
                    scorer, threshold=0.5, max_query_segments=None) -> RetrievalResult:
    """Stage 2: p_clf(candidate) = max over query segments of the classifier
    score; candidates below `threshold` are rejected; song score is the sum
    of its surviving segment scores."""
    if max_query_segments is not None:
        query_nodes = query_nodes[:max_query_segments]
    if not candidates or not query_nodes:
        return RetrievalResult(ranked=[])

    surviving: dict[str, list[Candidate]] = {}
    for cand in candidates:
        _, rec = db.resolve(cand.vec_id)
        p = max(scorer(qn, NodeMatrix(rec.nodes)) for qn in query_nodes)
        cand.p_clf = p
        if p >= threshold:
            surviving.setdefault(cand.song_id, []).append(cand)

    results = []
    for song_id, cands in surviving.items():
        p_song = float(sum(c.p_clf for c in cands))
        segs = sorted(((c.offset, c.p_clf) for c in cands),
                      key=lambda t: (-t[1], t[0]))
        results.append(SongResult(song_id=song_id, p_song=p_song, segments=segs))
    results.sort(key=lambda r: (-r.p_song, -r.segments[0][1], r.song_id))
    return RetrievalResult(ranked=results)


def run_query(wave: Waveform, encoder_params: EncoderParams,
              clf_params: MhcaParams, mel_cfg: MelConfig, index: IvfPqIndex,
              db: ReferenceDb, topk_per_segment=20, threshold=0.5,
              max_query_segments=None) -> RetrievalResult:
    """Full two-stage pipeline for one query recording."""
    query_fps, query_nodes = encode_query(wave, encoder_params, mel_cfg)
    candidates = retrieve_candidates(query_fps, index, db, topk_per_segment)
    return refine_and_rank(query_nodes, candidates, db, make_scorer(clf_params),
                           threshold=threshold,
                           max_query_segments=max_query_segments)
