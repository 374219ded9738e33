"""Average precision under the MEDIUM / HARD / HARD_STAR protocols, R@k and mAP@R."""

from __future__ import annotations

import csv
import enum
import io
import json
import logging
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .store import Manifest, QueryRecord, _atomic_write

log = logging.getLogger(__name__)


class Protocol(enum.Enum):
    MEDIUM = "medium"
    HARD = "hard"
    HARD_STAR = "hard-star"

    @classmethod
    def parse(cls, name: "str | Protocol") -> "Protocol":
        if isinstance(name, cls):
            return name
        key = name.lower().replace("_", "-")
        for p in cls:
            if key in (p.value, p.name.lower().replace("_", "-")):
                return p
        raise ValueError(f"unknown protocol {name!r}; choose from medium, hard, hard-star")


def _tiers(ranked) -> list[str]:
    return [r[1] if isinstance(r, tuple) else r for r in ranked]


def effective_relevance(ranked, protocol: Protocol | str = Protocol.MEDIUM) -> np.ndarray:
    """0/1 relevance of the list after protocol-specific removals."""
    protocol = Protocol.parse(protocol)
    tiers = _tiers(ranked)
    if protocol is Protocol.MEDIUM:
        return np.array([t in ("positive", "easy") for t in tiers if t != "junk"], bool)
    if protocol is Protocol.HARD_STAR and "easy" in tiers:
        raise ValueError("HARD_STAR ranking contains easy images; remove them from the database first")
    return np.array([t == "positive" for t in tiers if t not in ("junk", "easy")], bool)


def average_precision(ranked, protocol: Protocol | str = Protocol.MEDIUM) -> float | None:
    """Mean of precision at each relevant hit; None when nothing is relevant.

    Summed in exact rationals and rounded once, so 7/12 comes out as 7/12.
    """
    rel = effective_relevance(ranked, protocol)
    ranks = np.flatnonzero(rel) + 1
    if len(ranks) == 0:
        return None
    total = sum(Fraction(hit, int(rank)) for hit, rank in enumerate(ranks, start=1))
    return float(total / len(ranks))


def recall_at_k(ranked, k: int, protocol: Protocol | str = Protocol.MEDIUM) -> float | None:
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    rel = effective_relevance(ranked, protocol)
    if not rel.any():
        return None
    return float(rel[:k].any())


def map_at_R(ranked, protocol: Protocol | str = Protocol.MEDIUM) -> float | None:
    rel = effective_relevance(ranked, protocol)
    R = int(rel.sum())
    if R == 0:
        return None
    top = rel[:R]
    prec = np.cumsum(top) / np.arange(1, R + 1)
    return float((prec * top).sum() / R)


@dataclass
class EvalReport:
    protocol: Protocol
    mAP: float
    recall_at: dict[int, float]
    map_at_R: float
    per_query: dict[str, float] = field(default_factory=dict)
    skipped: list[str] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "protocol": self.protocol.value,
            "mAP": self.mAP,
            "recall_at": {str(k): v for k, v in self.recall_at.items()},
            "map_at_R": self.map_at_R,
            "per_query": self.per_query,
            "skipped": self.skipped,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "EvalReport":
        return cls(
            Protocol.parse(doc["protocol"]),
            doc["mAP"],
            {int(k): v for k, v in doc["recall_at"].items()},
            doc["map_at_R"],
            dict(doc.get("per_query", {})),
            list(doc.get("skipped", [])),
        )


def full_ranking(record: QueryRecord, head: Sequence[str]) -> list[str]:
    """Re-ranked head followed by the rest of the gallery in its original order."""
    seen = set(head)
    return list(head) + [g for g in record.gallery if g not in seen]


def evaluate(
    results,
    manifest: Manifest,
    protocol: Protocol | str = Protocol.MEDIUM,
    ks: Iterable[int] = (1, 5, 10),
) -> EvalReport:
    """Aggregate per-query metrics.

    ``results`` yields objects with ``query_id`` and ``ranking`` (or
    ``(query_id, ranking)`` pairs).  Queries with nothing relevant are
    skipped and listed in ``report.skipped``.
    """
    protocol = Protocol.parse(protocol)
    if protocol is Protocol.HARD_STAR and not manifest.easy_removed:
        raise ValueError("HARD_STAR needs a manifest with easy images removed (Manifest.without_easy)")
    ks = sorted(set(int(k) for k in ks))
    records = manifest.by_id()
    aps: dict[str, float] = {}
    recalls = {k: [] for k in ks}
    mapr = []
    skipped = []
    for res in results:
        qid, head = (res if isinstance(res, tuple) else (res.query_id, res.ranking))
        if qid not in records:
            raise KeyError(qid)
        rec = records[qid]
        if protocol is Protocol.HARD_STAR:
            head = [g for g in head if rec.tier(g) != "easy"]
        ranked = [rec.tier(g) for g in full_ranking(rec, head)]
        ap = average_precision(ranked, protocol)
        if ap is None:
            skipped.append(qid)
            continue
        aps[qid] = ap
        for k in ks:
            recalls[k].append(recall_at_k(ranked, k, protocol))
        mapr.append(map_at_R(ranked, protocol))
    if skipped:
        log.info("%d queries without relevant images skipped", len(skipped))

    def mean(xs):
        return float(np.mean(xs)) if xs else 0.0

    return EvalReport(
        protocol, mean(list(aps.values())), {k: mean(v) for k, v in recalls.items()}, mean(mapr), aps, skipped
    )


def baseline_results(manifest: Manifest) -> list[tuple[str, list[str]]]:
    """Global-retrieval order, i.e. the identity re-ranker."""
    return [(q.query_id, list(q.gallery)) for q in manifest.queries]


def write_report(report: EvalReport, path) -> None:
    _atomic_write(Path(path), json.dumps(report.to_json(), indent=1).encode())


def reports_csv(rows: dict[str, list[EvalReport]], ks: Sequence[int] = (1, 5, 10)) -> str:
    """One row per method, mAP / mAP@R / R@k columns per protocol."""
    protocols: list[Protocol] = []
    for reps in rows.values():
        for r in reps:
            if r.protocol not in protocols:
                protocols.append(r.protocol)
    header = ["method"]
    for p in protocols:
        header += [f"{p.value}_mAP", f"{p.value}_mAP@R"] + [f"{p.value}_R@{k}" for k in ks]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for method, reps in rows.items():
        by = {r.protocol: r for r in reps}
        row = [method]
        for p in protocols:
            r = by.get(p)
            if r is None:
                row += [""] * (2 + len(ks))
            else:
                row += [f"{100 * r.mAP:.2f}", f"{100 * r.map_at_R:.2f}"]
                row += [f"{100 * r.recall_at[k]:.2f}" if k in r.recall_at else "" for k in ks]
        w.writerow(row)
    return buf.getvalue()
