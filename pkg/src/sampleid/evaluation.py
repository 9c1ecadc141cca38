"""Metrics and annotation handling.

Annotation CSV schema (header required, comma-delimited):

    query_id,reference_id,occurrences,sample_type,stretch_ratio,query_stems,reference_stems,comment

  * occurrences: semicolon-separated `qs-qe:rs-re` time spans in seconds
    (query start-end : reference start-end), 1 ms canonical precision.
  * sample_type: one of riff | beat | 1-note.
  * stretch_ratio: query tempo / reference tempo, > 0.
  * query_stems / reference_stems: space-separated stem names (may be empty).

Average precision follows the retrieval-pessimistic convention: each
relevant item contributes precision at its rank, unretrieved relevant
items contribute 0, and the sum is divided by the total relevant count.
Hit rates are per-occurrence: each annotated occurrence long enough for
the requested query length yields one crop anchored at the occurrence's
query start, and the crop is a hit when its own reference id appears in
the top N.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .audio import Waveform

SAMPLE_TYPES = ("riff", "beat", "1-note")
STRETCH_THRESHOLD = 0.05


@dataclass
class Occurrence:
    query_start: float
    query_end: float
    ref_start: float
    ref_end: float


@dataclass
class AnnotationRecord:
    query_id: str
    reference_id: str
    occurrences: list[Occurrence]
    sample_type: str
    stretch_ratio: float
    query_stems: list[str] = field(default_factory=list)
    reference_stems: list[str] = field(default_factory=list)
    comment: str = ""

    @property
    def significant_stretch(self):
        return abs(self.stretch_ratio - 1.0) > STRETCH_THRESHOLD


_HEADER = ["query_id", "reference_id", "occurrences", "sample_type",
           "stretch_ratio", "query_stems", "reference_stems", "comment"]


def _parse_span(token, line_no):
    try:
        q_part, r_part = token.split(":")
        qs, qe = (float(v) for v in q_part.split("-"))
        rs, re_ = (float(v) for v in r_part.split("-"))
    except ValueError as e:
        raise ValueError(f"line {line_no}: malformed occurrence {token!r}") from e
    if qs >= qe or rs >= re_:
        raise ValueError(f"line {line_no}: end <= start in occurrence {token!r}")
    return Occurrence(qs, qe, rs, re_)


def parse_annotations(source) -> list[AnnotationRecord]:
    """Parse the annotation CSV from a path or file-like object."""
    if hasattr(source, "read"):
        return _parse_annotation_stream(source)
    with open(source, newline="", encoding="utf-8") as f:
        return _parse_annotation_stream(f)


def _parse_annotation_stream(f):
    reader = csv.reader(f)
    try:
        header = next(reader)
    except StopIteration:
        raise ValueError("empty annotation file") from None
    if [h.strip() for h in header] != _HEADER:
        raise ValueError(f"line 1: expected header {','.join(_HEADER)}")

    records = []
    for row in reader:
        line_no = reader.line_num
        if not row:
            continue
        if len(row) != len(_HEADER):
            raise ValueError(f"line {line_no}: expected {len(_HEADER)} columns, got {len(row)}")
        qid, rid, occ_s, stype, ratio_s, q_stems, r_stems, comment = (v.strip() for v in row)
        if stype not in SAMPLE_TYPES:
            raise ValueError(f"line {line_no}: unknown sample type {stype!r}")
        try:
            ratio = float(ratio_s)
        except ValueError:
            raise ValueError(f"line {line_no}: bad stretch ratio {ratio_s!r}") from None
        if ratio <= 0:
            raise ValueError(f"line {line_no}: non-positive stretch ratio {ratio}")
        occurrences = [_parse_span(t.strip(), line_no)
                       for t in occ_s.split(";") if t.strip()]
        if not occurrences:
            raise ValueError(f"line {line_no}: no occurrences")
        records.append(AnnotationRecord(
            query_id=qid, reference_id=rid, occurrences=occurrences,
            sample_type=stype, stretch_ratio=ratio,
            query_stems=q_stems.split() if q_stems else [],
            reference_stems=r_stems.split() if r_stems else [],
            comment=comment,
        ))
    return records


def format_annotations(records) -> str:
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(_HEADER)
    for r in records:
        occ = ";".join(
            f"{o.query_start:.3f}-{o.query_end:.3f}:{o.ref_start:.3f}-{o.ref_end:.3f}"
            for o in r.occurrences
        )
        writer.writerow([r.query_id, r.reference_id, occ, r.sample_type,
                         f"{r.stretch_ratio:.4f}", " ".join(r.query_stems),
                         " ".join(r.reference_stems), r.comment])
    return out.getvalue()


def write_annotations(path, records):
    with open(path, "w", encoding="utf-8") as f:
        f.write(format_annotations(records))


# ---------------------------------------------------------------------------
# Ranking metrics
# ---------------------------------------------------------------------------


def average_precision(ranking, relevant) -> float:
    """Mean of precision@rank over relevant items; missing items count 0."""
    relevant = set(relevant)
    if not relevant:
        raise ValueError("empty relevance set")
    if len(set(ranking)) != len(ranking):
        raise ValueError("ranking contains duplicates")
    hits = 0
    total = 0.0
    for rank, item in enumerate(ranking, start=1):
        if item in relevant:
            hits += 1
            total += hits / rank
    return total / len(relevant)


def compute_map(rankings: dict, relevance: dict) -> float:
    """mAP over queries; `rankings` and `relevance` are keyed by query id."""
    if not relevance:
        raise ValueError("no queries")
    aps = []
    for qid, relevant in relevance.items():
        aps.append(average_precision(rankings.get(qid, []), relevant))
    return float(np.mean(aps))


# ---------------------------------------------------------------------------
# Hit rates
# ---------------------------------------------------------------------------


@dataclass
class HitRateReport:
    rates: dict            # (length_s, n) -> hit rate
    evaluated: dict        # length_s -> crops evaluated
    skipped: dict          # length_s -> occurrences too short

    def to_dict(self):
        return {
            "rates": {f"{length}s_top{n}": v for (length, n), v in self.rates.items()},
            "evaluated": {f"{k}s": v for k, v in self.evaluated.items()},
            "skipped": {f"{k}s": v for k, v in self.skipped.items()},
        }


def compute_hit_rates(pipeline, records, query_audio,
                      lengths=(5, 7, 10, 15, 20), ns=(1, 3, 10)) -> HitRateReport:
    """Per-occurrence hit rates over cropped queries.

    `pipeline(wave) -> ranked song ids`; `query_audio(query_id) -> Waveform`.
    A crop of `length` seconds starts at each occurrence's annotated query
    start; occurrences shorter than the length are skipped and counted.
    """
    rates, evaluated, skipped = {}, {}, {}
    waves: dict[str, Waveform] = {}
    for length in lengths:
        hits = {n: 0 for n in ns}
        n_eval = 0
        n_skip = 0
        for rec in records:
            for occ in rec.occurrences:
                if occ.query_end - occ.query_start < length:
                    n_skip += 1
                    continue
                if rec.query_id not in waves:
                    waves[rec.query_id] = query_audio(rec.query_id)
                wave = waves[rec.query_id]
                start = int(round(occ.query_start * wave.sample_rate))
                stop = start + int(round(length * wave.sample_rate))
                if stop > wave.samples.size:
                    n_skip += 1
                    continue
                crop = Waveform(wave.samples[start:stop], wave.sample_rate)
                ranked = list(pipeline(crop))
                n_eval += 1
                for n in ns:
                    if rec.reference_id in ranked[:n]:
                        hits[n] += 1
        evaluated[length] = n_eval
        skipped[length] = n_skip
        for n in ns:
            rates[(length, n)] = hits[n] / n_eval if n_eval else 0.0
    return HitRateReport(rates=rates, evaluated=evaluated, skipped=skipped)


# ---------------------------------------------------------------------------
# Stratified reporting
# ---------------------------------------------------------------------------


@dataclass
class Stratum:
    count: int
    map_score: float | None    # None when too few samples to report


def stratify(rankings: dict, relevance: dict, records,
             min_stratum=3) -> dict[str, Stratum]:
    """mAP recomputed over annotation-record subsets.

    Each record contributes its query's AP to its sample-type stratum and
    its time-stretch stratum, so stratum counts sum to the number of
    annotated relationships.  Strata smaller than `min_stratum` report
    their count only.
    """
    per_query_ap = {
        qid: average_precision(rankings.get(qid, []), rel)
        for qid, rel in relevance.items()
    }
    buckets: dict[str, list[float]] = {t: [] for t in SAMPLE_TYPES}
    buckets["stretch>5%"] = []
    buckets["stretch<5%"] = []
    for rec in records:
        if rec.query_id not in per_query_ap:
            raise ValueError(f"no ranking for annotated query {rec.query_id!r}")
        ap = per_query_ap[rec.query_id]
        buckets[rec.sample_type].append(ap)
        key = "stretch>5%" if rec.significant_stretch else "stretch<5%"
        buckets[key].append(ap)

    out = {}
    for name, values in buckets.items():
        if len(values) >= min_stratum:
            out[name] = Stratum(count=len(values), map_score=float(np.mean(values)))
        else:
            out[name] = Stratum(count=len(values), map_score=None)
    return out


@dataclass
class EvalReport:
    overall_map: float
    per_query_ap: dict
    hit_rates: HitRateReport | None
    strata: dict[str, Stratum]

    def to_dict(self):
        return {
            "overall_map": self.overall_map,
            "per_query_ap": self.per_query_ap,
            "hit_rates": self.hit_rates.to_dict() if self.hit_rates else None,
            "strata": {k: {"count": s.count, "map": s.map_score}
                       for k, s in self.strata.items()},
        }
