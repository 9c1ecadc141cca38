"""IVF-PQ approximate nearest-neighbour index over unit-norm fingerprints.

Coarse structure: k-means centroids partition the space into inverted
lists; assignment and probing use max inner product (equal to cosine on
unit vectors, matching the contrastive training similarity).  Residuals
(vector minus its coarse centroid) are product-quantized: each of m
subspaces gets its own small codebook and stores one byte per vector.

Search scans the nprobe best lists and scores candidates with asymmetric
distance computation (per-subspace lookup tables of query-to-codebook
inner products).  When raw vectors are retained (the default at desk
scale) the deepest `rerank_depth` ADC candidates are rescored exactly,
which removes quantization noise from the final ranking.  All ties break
toward the lower id.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .container import ContainerError, read_container, write_container

MAGIC = b"SIDX"


def default_nlist(n_vectors):
    """ceil(sqrt(n)) rounded to the nearest power of two (at least 1)."""
    root = int(np.ceil(np.sqrt(max(n_vectors, 1))))
    return int(2 ** max(0, round(np.log2(root))))


@dataclass
class IvfPqConfig:
    dim: int = 128
    nlist: int = 64
    m: int = 16
    nbits: int = 8
    nprobe: int = 8
    keep_raw: bool = True
    rerank_depth: int = 100
    kmeans_iters: int = 25
    seed: int = 0

    def __post_init__(self):
        if self.dim % self.m != 0:
            raise ValueError(f"dim {self.dim} not divisible by m={self.m}")
        if not 1 <= self.nbits <= 8:
            raise ValueError("nbits must be in [1, 8]")
        if self.nprobe > self.nlist:
            raise ValueError(f"nprobe {self.nprobe} exceeds nlist {self.nlist}")

    @property
    def ksub(self):
        return 2 ** self.nbits

    def to_dict(self):
        return {"dim": self.dim, "nlist": self.nlist, "m": self.m,
                "nbits": self.nbits, "nprobe": self.nprobe,
                "keep_raw": self.keep_raw, "rerank_depth": self.rerank_depth,
                "kmeans_iters": self.kmeans_iters, "seed": self.seed}

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def kmeans(data, k, iters=25, rng=None):
    """Lloyd's k-means with k-means++ seeding; empty clusters are re-seeded
    from the point farthest from its assigned centroid.  Deterministic
    given the generator state."""
    rng = rng or np.random.default_rng(0)
    data = np.asarray(data, dtype=np.float64)
    n = data.shape[0]
    if n < 1:
        raise ValueError("k-means needs at least one point")

    # k-means++ initialization
    centroids = np.empty((k, data.shape[1]))
    first = int(rng.integers(0, n))
    centroids[0] = data[first]
    d2 = np.sum((data - centroids[0]) ** 2, axis=1)
    for i in range(1, k):
        total = d2.sum()
        if total <= 0:
            centroids[i] = data[int(rng.integers(0, n))]
            continue
        probs = d2 / total
        pick = int(rng.choice(n, p=probs))
        centroids[i] = data[pick]
        d2 = np.minimum(d2, np.sum((data - centroids[i]) ** 2, axis=1))

    assign = None
    for _ in range(iters):
        dists = (
            np.sum(data ** 2, axis=1, keepdims=True)
            - 2.0 * data @ centroids.T
            + np.sum(centroids ** 2, axis=1)
        )
        assign = np.argmin(dists, axis=1)
        point_d2 = dists[np.arange(n), assign]
        for c in range(k):
            members = assign == c
            if members.any():
                centroids[c] = data[members].mean(axis=0)
            else:
                far = int(np.argmax(point_d2))
                centroids[c] = data[far]
                point_d2[far] = 0.0
    return centroids, assign


class IvfPqIndex:
    def __init__(self, cfg: IvfPqConfig, centroids, codebooks, config_hash=""):
        self.cfg = cfg
        self.centroids = np.asarray(centroids, dtype=np.float64)
        self.codebooks = np.asarray(codebooks, dtype=np.float64)
        self.config_hash = config_hash
        self.list_ids = [[] for _ in range(cfg.nlist)]
        self.list_codes = [[] for _ in range(cfg.nlist)]
        self.lookup: dict[int, tuple[str, float]] = {}
        self.raw: dict[int, np.ndarray] = {}

    # -- construction -------------------------------------------------

    @classmethod
    def train(cls, vectors, cfg: IvfPqConfig, config_hash=""):
        vectors = np.asarray(vectors, dtype=np.float64)
        needed = max(cfg.nlist, cfg.ksub) * 4
        if vectors.shape[0] < needed:
            raise ValueError(
                f"need >= {needed} training vectors for nlist={cfg.nlist}, "
                f"nbits={cfg.nbits}; got {vectors.shape[0]}"
            )
        if vectors.shape[1] != cfg.dim:
            raise ValueError(f"vectors are {vectors.shape[1]}-d, config says {cfg.dim}")
        rng = np.random.default_rng(cfg.seed)
        centroids, _ = kmeans(vectors, cfg.nlist, cfg.kmeans_iters, rng)

        assign = np.argmax(vectors @ centroids.T, axis=1)
        residuals = vectors - centroids[assign]
        sub_dim = cfg.dim // cfg.m
        codebooks = np.empty((cfg.m, cfg.ksub, sub_dim))
        for j in range(cfg.m):
            sub = residuals[:, j * sub_dim:(j + 1) * sub_dim]
            codebooks[j], _ = kmeans(sub, cfg.ksub, cfg.kmeans_iters, rng)
        return cls(cfg, centroids, codebooks, config_hash)

    @property
    def size(self):
        return len(self.lookup)

    def _encode(self, vector, list_no):
        residual = vector - self.centroids[list_no]
        sub_dim = self.cfg.dim // self.cfg.m
        code = np.empty(self.cfg.m, dtype=np.uint8)
        for j in range(self.cfg.m):
            sub = residual[j * sub_dim:(j + 1) * sub_dim]
            d2 = np.sum((self.codebooks[j] - sub) ** 2, axis=1)
            code[j] = int(np.argmin(d2))
        return code

    def add(self, vec_id, vector, song_id=None, offset=None):
        if vec_id in self.lookup:
            raise ValueError(f"duplicate id {vec_id}")
        vector = np.asarray(vector, dtype=np.float64)
        if vector.shape != (self.cfg.dim,):
            raise ValueError(f"vector shape {vector.shape}, expected ({self.cfg.dim},)")
        list_no = int(np.argmax(self.centroids @ vector))
        self.list_ids[list_no].append(int(vec_id))
        self.list_codes[list_no].append(self._encode(vector, list_no))
        self.lookup[int(vec_id)] = (song_id, offset)
        if self.cfg.keep_raw:
            self.raw[int(vec_id)] = vector.copy()

    # -- search -------------------------------------------------------

    def search(self, query, topk, nprobe=None):
        if topk < 1:
            raise ValueError("topk must be >= 1")
        nprobe = self.cfg.nprobe if nprobe is None else nprobe
        if nprobe > self.cfg.nlist:
            raise ValueError(f"nprobe {nprobe} exceeds nlist {self.cfg.nlist}")
        if self.size == 0:
            return []
        query = np.asarray(query, dtype=np.float64)

        coarse = self.centroids @ query
        probe = np.argsort(-coarse, kind="stable")[:nprobe]

        sub_dim = self.cfg.dim // self.cfg.m
        lut = np.empty((self.cfg.m, self.cfg.ksub))
        for j in range(self.cfg.m):
            lut[j] = self.codebooks[j] @ query[j * sub_dim:(j + 1) * sub_dim]

        cand_ids, cand_scores = [], []
        for list_no in probe:
            ids = self.list_ids[list_no]
            if not ids:
                continue
            codes = np.asarray(self.list_codes[list_no])          # (n, m)
            adc = coarse[list_no] + lut[np.arange(self.cfg.m), codes].sum(axis=1)
            cand_ids.append(np.asarray(ids, dtype=np.int64))
            cand_scores.append(adc)
        if not cand_ids:
            return []
        ids = np.concatenate(cand_ids)
        scores = np.concatenate(cand_scores)

        order = np.lexsort((ids, -scores))
        if self.cfg.keep_raw and self.raw:
            # rescore the deepest ADC candidates exactly, keep the tail as-is
            depth = min(self.cfg.rerank_depth, order.size)
            head = order[:depth]
            exact = np.array([self.raw[int(ids[i])] @ query for i in head])
            reorder = np.lexsort((ids[head], -exact))
            results = [(int(ids[head[r]]), float(exact[r])) for r in reorder]
            results += [(int(ids[i]), float(scores[i])) for i in order[depth:]]
            return results[:topk]
        top = order[:topk]
        return [(int(ids[i]), float(scores[i])) for i in top]

    def exact_search(self, query, topk):
        if not self.cfg.keep_raw:
            raise ValueError("raw vectors were not retained")
        ids = np.fromiter(self.raw.keys(), dtype=np.int64)
        mat = np.stack([self.raw[int(i)] for i in ids]) if ids.size else np.empty((0, self.cfg.dim))
        return exact_search(ids, mat, query, topk)

    # -- persistence ----------------------------------------------------

    def save(self, path):
        flat_ids = [np.asarray(l, dtype=np.int64) for l in self.list_ids]
        list_sizes = np.array([len(l) for l in self.list_ids], dtype=np.int64)
        all_ids = (np.concatenate(flat_ids) if self.size else np.empty(0, dtype=np.int64))
        all_codes = (
            np.concatenate([np.asarray(c, dtype=np.uint8).reshape(-1, self.cfg.m)
                            for c in self.list_codes if c])
            if self.size else np.empty((0, self.cfg.m), dtype=np.uint8)
        )
        blocks = {
            "centroids": self.centroids,
            "codebooks": self.codebooks,
            "list_sizes": list_sizes,
            "ids": all_ids,
            "codes": all_codes,
        }
        if self.cfg.keep_raw and self.size:
            raw_ids = np.fromiter(self.raw.keys(), dtype=np.int64)
            blocks["raw_ids"] = raw_ids
            # float64 so a save/load round-trip returns identical scores
            blocks["raw"] = np.stack([self.raw[int(i)] for i in raw_ids])
        meta = {
            "kind": "index",
            "config": self.cfg.to_dict(),
            "config_hash": self.config_hash,
            "lookup": {str(k): [v[0], v[1]] for k, v in self.lookup.items()},
        }
        write_container(path, MAGIC, meta, blocks)


def load_index(path) -> IvfPqIndex:
    meta, blocks = read_container(path, MAGIC)
    cfg = IvfPqConfig.from_dict(meta["config"])
    if blocks["centroids"].shape[1] != cfg.dim:
        raise ContainerError(f"{path}: centroid dim mismatch")
    idx = IvfPqIndex(cfg, blocks["centroids"], blocks["codebooks"],
                     meta.get("config_hash", ""))
    sizes = blocks["list_sizes"]
    ids, codes = blocks["ids"], blocks["codes"]
    pos = 0
    for list_no, size in enumerate(sizes):
        for row in range(pos, pos + int(size)):
            idx.list_ids[list_no].append(int(ids[row]))
            idx.list_codes[list_no].append(codes[row].copy())
        pos += int(size)
    for key, (song, offset) in meta["lookup"].items():
        idx.lookup[int(key)] = (song, offset)
    if "raw_ids" in blocks:
        for i, rid in enumerate(blocks["raw_ids"]):
            idx.raw[int(rid)] = blocks["raw"][i].astype(np.float64)
    return idx


def exact_search(ids, vectors, query, topk):
    """Brute-force inner-product ranking over raw vectors (the oracle)."""
    ids = np.asarray(ids, dtype=np.int64)
    vectors = np.asarray(vectors, dtype=np.float64)
    if ids.size == 0:
        return []
    scores = vectors @ np.asarray(query, dtype=np.float64)
    order = np.lexsort((ids, -scores))[:topk]
    return [(int(ids[i]), float(scores[i])) for i in order]
