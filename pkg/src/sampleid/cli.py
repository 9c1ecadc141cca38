"""Command-line entry point.

    sampleid <subcommand> [flags]

Subcommands: fingerprint, gen-pairs, train-encoder, train-classifier,
build-index, query, evaluate, gradcheck, selftest.  A JSON config file
(--config) supplies defaults; explicit flags win.  Every report embeds
the config hash and seed.  Exit codes: 0 success, 1 usage error,
2 runtime failure.  Set SAMPLEID_LOG=debug for verbose logging.
"""

from __future__ import annotations

import argparse
import glob
import json
import logging
import os
import sys
import time

import numpy as np

from .audio import Waveform, load_audio, save_wav
from .config import RunConfig
from .container import ContainerError
from .evaluation import compute_hit_rates, compute_map, parse_annotations, stratify
from .index import load_index
from .pairgen import generate_pair, load_stem_set
from .retrieval import (ReferenceDb, build_index_from_db, ingest_reference,
                        run_query)
from .selftest import run_selftest
from .training import gradient_suite, train_classifier, train_encoder
from .weights import load_weights, save_weights

log = logging.getLogger("sampleid")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


def _report_header(cfg: RunConfig):
    return {"config_hash": cfg.config_hash(), "seed": cfg.seed,
            "timestamp": time.time()}


def _write_json(path, payload):
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")


def _load_config(args) -> RunConfig:
    cfg = RunConfig.from_file(args.config) if args.config else RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg.data["seed"] = args.seed
    if getattr(args, "threads", None) is not None:
        cfg.data["threads"] = args.threads
    return cfg


def _check_artifact_hashes(force, **artifacts):
    hashes = {name: h for name, h in artifacts.items() if h}
    if len(set(hashes.values())) > 1:
        detail = ", ".join(f"{k}={v}" for k, v in hashes.items())
        if force:
            log.warning("config hash mismatch ignored (--force): %s", detail)
        else:
            raise ContainerError(
                f"config hash mismatch across artifacts ({detail}); "
                f"pass --force to override"
            )


def _stem_tracks(root, sample_rate):
    dirs = sorted(d for d in glob.glob(os.path.join(root, "*")) if os.path.isdir(d))
    if not dirs:
        raise ValueError(f"no track directories under {root}")
    return [load_stem_set(d, sample_rate) for d in dirs]


# ---------------------------------------------------------------------------
# Subcommand implementations
# ---------------------------------------------------------------------------


def _cmd_fingerprint(args):
    cfg = _load_config(args)
    encoder_params, _, mel_cfg, meta = load_weights(args.weights)
    wave = load_audio(args.audio, args.sample_rate)
    from .retrieval import encode_query
    fps, _ = encode_query(wave, encoder_params, mel_cfg)
    offsets = [i * mel_cfg.hop_seconds for i in range(fps.shape[0])]
    payload = _report_header(cfg)
    payload["fingerprints"] = [
        {"offset": o, "vector": fp.tolist()} for o, fp in zip(offsets, fps)
    ]
    _write_json(args.out, payload)
    log.info("wrote %d fingerprints to %s", len(offsets), args.out)
    return 0


def _cmd_gen_pairs(args):
    cfg = _load_config(args)
    rng = np.random.default_rng(cfg.seed)
    tracks = _stem_tracks(args.root, cfg.sample_rate)
    mel = cfg.mel_config()
    aug = cfg.aug_ranges()
    os.makedirs(args.out, exist_ok=True)
    headroom = 0.25
    for i in range(args.count):
        track = tracks[int(rng.integers(0, len(tracks)))]
        t_max = track.duration - mel.window_seconds - headroom
        if t_max < 0:
            raise ValueError(f"track {track.track_id} too short for pairs")
        t = float(rng.uniform(0.0, t_max))
        pair = generate_pair(track, t, mel.window_seconds, aug, rng)
        stem = os.path.join(args.out, f"pair_{i:05d}")
        save_wav(stem + "_q.wav", pair.x_q)
        save_wav(stem + "_r.wav", pair.x_r)
        sidecar = dict(pair.provenance)
        sidecar.update(_report_header(cfg))
        _write_json(stem + ".json", sidecar)
    log.info("wrote %d pairs to %s", args.count, args.out)
    return 0


def _cmd_train_encoder(args):
    cfg = _load_config(args)
    tracks = _stem_tracks(args.stems_root, cfg.sample_rate)
    params, history = train_encoder(tracks, cfg.encoder_train_config())
    save_weights(args.out, params, None, cfg.mel_config(),
                 config_hash=cfg.config_hash(), seed=cfg.seed)
    log.info("encoder trained: best epoch %d, val loss %s",
             history.best_epoch,
             history.val_loss[history.best_epoch] if history.val_loss else "n/a")
    return 0


def _cmd_train_classifier(args):
    cfg = _load_config(args)
    tracks = _stem_tracks(args.stems_root, cfg.sample_rate)
    encoder_params, _, mel_cfg, meta = load_weights(args.weights)
    tcfg = cfg.classifier_train_config()
    tcfg.mel = mel_cfg
    clf, losses = train_classifier(tracks, encoder_params, tcfg)
    save_weights(args.out, encoder_params, clf, mel_cfg,
                 config_hash=meta.get("config_hash", cfg.config_hash()),
                 seed=cfg.seed)
    log.info("classifier trained: final loss %.4f", losses[-1] if losses else float("nan"))
    return 0


def _cmd_build_index(args):
    cfg = _load_config(args)
    if args.audio_root:
        if not args.weights:
            raise UsageError("--audio-root requires --weights for ingestion")
        encoder_params, _, mel_cfg, meta = load_weights(args.weights)
        db = ReferenceDb(config_hash=meta.get("config_hash", ""))
        wavs = sorted(glob.glob(os.path.join(args.audio_root, "*.wav")))
        if not wavs:
            raise ValueError(f"no .wav files under {args.audio_root}")
        for path in wavs:
            song_id = os.path.splitext(os.path.basename(path))[0]
            wave = load_audio(path, cfg.sample_rate)
            ingest_reference(db, song_id, song_id, wave, encoder_params, mel_cfg)
            log.info("ingested %s (%d segments)", song_id, len(db.songs[song_id].segments))
        db.save(args.db)
    else:
        db = ReferenceDb.load(args.db)

    fp_dim = db.fingerprint_matrix().shape[1]
    ivf_cfg = cfg.index_config(db.segment_count, fp_dim)
    if args.nlist:
        ivf_cfg.nlist = args.nlist
    if args.m:
        ivf_cfg.m = args.m
    if args.nprobe:
        ivf_cfg.nprobe = min(args.nprobe, ivf_cfg.nlist)
    index = build_index_from_db(db, ivf_cfg, config_hash=db.config_hash)
    index.save(args.out)
    log.info("index built: %d vectors, nlist=%d, m=%d -> %s",
             index.size, ivf_cfg.nlist, ivf_cfg.m, args.out)
    return 0


def _cmd_query(args):
    cfg = _load_config(args)
    encoder_params, clf_params, mel_cfg, meta = load_weights(args.weights)
    if clf_params is None:
        raise ValueError("weights file has no classifier stage; run train-classifier")
    index = load_index(args.index)
    db = ReferenceDb.load(args.db)
    _check_artifact_hashes(args.force, weights=meta.get("config_hash", ""),
                           index=index.config_hash, db=db.config_hash)
    wave = load_audio(args.audio, cfg.sample_rate)
    result = run_query(wave, encoder_params, clf_params, mel_cfg, index, db,
                       topk_per_segment=args.topk_per_segment,
                       threshold=args.threshold)
    payload = _report_header(cfg)
    payload["query"] = args.audio
    payload["results"] = [
        {"song_id": r.song_id, "p_song": r.p_song,
         "segments": [{"offset": o, "score": s} for o, s in r.segments]}
        for r in result.ranked
    ]
    _write_json(args.out, payload)
    log.info("query done: %d songs above threshold", len(result.ranked))
    return 0


def _cmd_evaluate(args):
    cfg = _load_config(args)
    encoder_params, clf_params, mel_cfg, meta = load_weights(args.weights)
    if clf_params is None:
        raise ValueError("weights file has no classifier stage; run train-classifier")
    index = load_index(args.index)
    db = ReferenceDb.load(args.db)
    _check_artifact_hashes(args.force, weights=meta.get("config_hash", ""),
                           index=index.config_hash, db=db.config_hash)
    records = parse_annotations(args.annotations)
    retr = cfg.data["retrieval"]

    def pipeline(wave: Waveform):
        result = run_query(wave, encoder_params, clf_params, mel_cfg, index, db,
                           topk_per_segment=retr["topk_per_segment"],
                           threshold=retr["threshold"],
                           max_query_segments=retr["max_query_segments"])
        return [r.song_id for r in result.ranked]

    def query_audio(query_id):
        path = os.path.join(args.audio_root, f"{query_id}.wav")
        if not os.path.exists(path):
            raise FileNotFoundError(f"missing audio for annotated id {query_id}")
        return load_audio(path, cfg.sample_rate)

    relevance: dict[str, set] = {}
    for rec in records:
        relevance.setdefault(rec.query_id, set()).add(rec.reference_id)
    rankings = {qid: pipeline(query_audio(qid)) for qid in sorted(relevance)}

    overall = compute_map(rankings, relevance)
    strata = stratify(rankings, relevance, records)
    hits = compute_hit_rates(pipeline, records, query_audio)

    payload = _report_header(cfg)
    payload["map"] = overall
    payload["strata"] = {k: {"count": s.count, "map": s.map_score}
                         for k, s in strata.items()}
    payload["hit_rates"] = hits.to_dict()
    _write_json(args.out, payload)

    print(f"mAP: {overall:.4f}")
    for name, s in strata.items():
        shown = f"{s.map_score:.4f}" if s.map_score is not None else "-"
        print(f"  {name:<12} n={s.count:<4} mAP={shown}")
    for (length, n), rate in sorted(hits.rates.items()):
        print(f"  top-{n:<3} @ {length:>2}s: {rate:.3f}")
    return 0


def _cmd_gradcheck(args):
    cfg = _load_config(args)
    reports = gradient_suite(tol=args.tol, seed=cfg.seed)
    ok = True
    for name, rep in reports.items():
        status = "PASS" if rep.passed else "FAIL"
        print(f"{status} {name}: max rel err {rep.max_rel_err:.3e} (tol {rep.tol:.1e})")
        ok = ok and rep.passed
    return 0 if ok else 2


def _cmd_selftest(args):
    cfg = _load_config(args)
    report = run_selftest(seed=cfg.seed)
    report.update(_report_header(cfg))
    for check in report["checks"]:
        status = "PASS" if check["passed"] else "FAIL"
        print(f"{status} {check['name']}: {check['detail']}")
    if args.out:
        _write_json(args.out, report)
    return 0 if report["passed"] else 2


# ---------------------------------------------------------------------------
# Argument wiring
# ---------------------------------------------------------------------------


def _build_parser():
    parser = _Parser(prog="sampleid", description=__doc__,
                     formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int, default=None, help="override config seed")
        p.add_argument("--threads", type=int, default=None,
                       help="worker cap; 1 is the deterministic path")
        p.formatter_class = argparse.ArgumentDefaultsHelpFormatter
        return p

    p = common(sub.add_parser("fingerprint", help="fingerprints for one audio file"))
    p.add_argument("--audio", required=True)
    p.add_argument("--weights", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--sample-rate", type=int, default=16_000)
    p.set_defaults(fn=_cmd_fingerprint)

    p = common(sub.add_parser("gen-pairs", help="synthesize training pairs from stems"))
    p.add_argument("--root", required=True, help="directory of <track>/<stem>.wav")
    p.add_argument("--count", type=int, default=10)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(fn=_cmd_gen_pairs)

    p = common(sub.add_parser("train-encoder", help="contrastive encoder stage"))
    p.add_argument("--stems-root", required=True)
    p.add_argument("--out", required=True, help="weights file")
    p.set_defaults(fn=_cmd_train_encoder)

    p = common(sub.add_parser("train-classifier", help="frozen-encoder classifier stage"))
    p.add_argument("--stems-root", required=True)
    p.add_argument("--weights", required=True, help="encoder weights in")
    p.add_argument("--out", required=True, help="combined weights out")
    p.set_defaults(fn=_cmd_train_classifier)

    p = common(sub.add_parser("build-index", help="ingest references and build IVF-PQ"))
    p.add_argument("--db", required=True, help="reference db file (in or out)")
    p.add_argument("--out", required=True, help="index file")
    p.add_argument("--audio-root", help="ingest all .wav here into --db first")
    p.add_argument("--weights", help="weights for ingestion")
    p.add_argument("--nlist", type=int, default=0)
    p.add_argument("--m", type=int, default=0)
    p.add_argument("--nprobe", type=int, default=0)
    p.set_defaults(fn=_cmd_build_index)

    p = common(sub.add_parser("query", help="two-stage retrieval for one recording"))
    p.add_argument("--index", required=True, help="index file")
    p.add_argument("--db", required=True, help="reference db file")
    p.add_argument("--weights", required=True, help="weights file")
    p.add_argument("--audio", required=True, help="query WAV")
    p.add_argument("--topk-per-segment", type=int, default=20,
                   help="ANN matches kept per query segment")
    p.add_argument("--threshold", type=float, default=0.5,
                   help="classifier rejection threshold")
    p.add_argument("--out", required=True, help="JSON report path")
    p.add_argument("--force", action="store_true",
                   help="run despite config-hash mismatches")
    p.set_defaults(fn=_cmd_query)

    p = common(sub.add_parser("evaluate", help="mAP, strata, and hit rates"))
    p.add_argument("--annotations", required=True, help="annotation CSV")
    p.add_argument("--audio-root", required=True, help="directory of <id>.wav files")
    p.add_argument("--index", required=True, help="index file")
    p.add_argument("--db", required=True, help="reference db file")
    p.add_argument("--weights", required=True, help="weights file")
    p.add_argument("--out", required=True, help="JSON report path")
    p.add_argument("--force", action="store_true",
                   help="run despite config-hash mismatches")
    p.set_defaults(fn=_cmd_evaluate)

    p = common(sub.add_parser("gradcheck", help="finite-difference gradient suite"))
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(fn=_cmd_gradcheck)

    p = common(sub.add_parser("selftest", help="built-in synthetic invariant suite"))
    p.add_argument("--out", help="write the JSON report here")
    p.set_defaults(fn=_cmd_selftest)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(
        level=getattr(logging, os.environ.get("SAMPLEID_LOG", "info").upper(),
                      logging.INFO),
        format="%(levelname)s %(name)s: %(message)s",
    )
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return 1
    try:
        return args.fn(args)
    except UsageError as e:
        print(e, file=sys.stderr)
        return 1
    except Exception as e:
        log.error("%s", e)
        return 2


if __name__ == "__main__":
    sys.exit(main())
