"""Image scores from token logits, single-pass and sliding-window re-ranking."""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from .errors import ShapeError
from .model import RerankerModel, TokenLogits, assemble_for, forward, pattern_for
from .numerics import sigmoid
from .sequence import invert_permutation
from .store import LocalDescriptorSet, _atomic_write


class AggregatorMode(enum.Enum):
    MEAN_TOKENS = "mean"
    FIRST_TOKEN = "first"
    SEP_TOKEN = "sep"

    @classmethod
    def parse(cls, name: "str | AggregatorMode") -> "AggregatorMode":
        if isinstance(name, cls):
            return name
        for m in cls:
            if name.lower() in (m.value, m.name.lower()):
                return m
        raise ValueError(f"unknown aggregator {name!r}; choose from sep, mean, first")


DEFAULT_AGGREGATOR = AggregatorMode.SEP_TOKEN


def aggregate(logits: TokenLogits, mode: AggregatorMode = DEFAULT_AGGREGATOR) -> tuple[np.ndarray, np.ndarray]:
    """Per-gallery-image scores in (0, 1) and a flag array marking fully padded images.

    Padded images score exactly 0.
    """
    mode = AggregatorMode.parse(mode)
    meta = logits.meta
    if len(logits.logits) != len(meta):
        raise ShapeError(f"{len(logits.logits)} logits for {len(meta)} tokens")
    L1 = meta.L + 1
    K = meta.K
    p = sigmoid(logits.logits.astype(np.float64)).reshape(K + 1, L1)[1:]
    pad = meta.is_padding.reshape(K + 1, L1)[1:]
    empty = pad.all(axis=1)
    if mode is AggregatorMode.SEP_TOKEN:
        scores = p[:, -1].copy()
    elif mode is AggregatorMode.FIRST_TOKEN:
        scores = p[:, 0].copy()
    else:
        keep = ~pad
        scores = (p * keep).sum(axis=1) / np.maximum(keep.sum(axis=1), 1)
    scores[empty] = 0.0
    return scores, empty


@dataclass
class RerankResult:
    query_id: str
    entries: list[tuple[str, float]]
    token_scores: dict[str, np.ndarray] | None = None
    window_log: list[tuple[int, int]] = field(default_factory=list)
    padded: list[str] = field(default_factory=list)

    @property
    def ranking(self) -> list[str]:
        return [i for i, _ in self.entries]

    @property
    def scores(self) -> list[float]:
        return [s for _, s in self.entries]

    def to_json(self) -> dict:
        return {
            "query_id": self.query_id,
            "ranking": self.ranking,
            "scores": self.scores,
            "windows": [list(w) for w in self.window_log],
        }

    @classmethod
    def from_json(cls, doc: dict) -> "RerankResult":
        ranking, scores = doc["ranking"], doc.get("scores") or [0.0] * len(doc["ranking"])
        if len(ranking) != len(scores):
            raise ValueError(f"query {doc.get('query_id')!r}: {len(ranking)} ids but {len(scores)} scores")
        return cls(doc["query_id"], list(zip(ranking, map(float, scores))), window_log=[tuple(w) for w in doc.get("windows", [])])


def write_results(results: Iterable[RerankResult], path) -> None:
    text = "".join(json.dumps(r.to_json()) + "\n" for r in results)
    _atomic_write(Path(path), text.encode())


def read_results(path) -> list[RerankResult]:
    out = []
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        if line.strip():
            try:
                out.append(RerankResult.from_json(json.loads(line)))
            except (KeyError, ValueError) as exc:
                raise ValueError(f"{path}:{n}: bad result record: {exc}") from exc
    return out


Scorer = Callable[[list[LocalDescriptorSet]], np.ndarray]


def score_gallery(
    model: RerankerModel,
    query: LocalDescriptorSet,
    gallery: list[LocalDescriptorSet],
    mode: AggregatorMode = DEFAULT_AGGREGATOR,
    shuffle_rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Eval-mode scores for ``gallery`` in its given order.

    With ``shuffle_rng`` the model sees the gallery in a random order and the
    scores are mapped back.  Returns (scores, padded flags, token probabilities).
    """
    perm = np.arange(len(gallery)) if shuffle_rng is None else shuffle_rng.permutation(len(gallery))
    seq = assemble_for(model, query, [gallery[p] for p in perm])
    out = forward(model, seq, pattern_for(model, seq.meta), mode="eval")
    s, empty = aggregate(out, mode)
    inv = invert_permutation(perm)
    L1 = model.config.L + 1
    tok = sigmoid(out.logits.astype(np.float64)).reshape(-1, L1)[1:][inv]
    return s[inv], empty[inv], tok


def model_scorer(model, query, mode=DEFAULT_AGGREGATOR, shuffle_rng=None) -> Scorer:
    return lambda gallery: score_gallery(model, query, gallery, mode, shuffle_rng)[0]


def _stable_desc(scores: np.ndarray) -> np.ndarray:
    return np.argsort(-np.asarray(scores, np.float64), kind="stable")


def rerank_once(
    model: RerankerModel,
    query: LocalDescriptorSet,
    gallery: list[LocalDescriptorSet],
    mode: AggregatorMode = DEFAULT_AGGREGATOR,
    shuffle_rng: np.random.Generator | None = None,
    keep_trace: bool = False,
) -> RerankResult:
    if len(gallery) != model.config.K:
        raise ShapeError(f"rerank_once needs exactly K={model.config.K} images, got {len(gallery)}")
    scores, empty, tok = score_gallery(model, query, gallery, AggregatorMode.parse(mode), shuffle_rng)
    order = _stable_desc(scores)
    ids = [g.image_id for g in gallery]
    return RerankResult(
        query.image_id,
        [(ids[i], float(scores[i])) for i in order],
        {ids[i]: tok[i] for i in range(len(ids))} if keep_trace else None,
        [(0, len(gallery))],
        [ids[i] for i in np.flatnonzero(empty)],
    )


def window_schedule(N: int, K: int, S: int) -> list[tuple[int, int]]:
    """Windows of size K from the tail toward the head with stride S; last clamps to [0, K)."""
    if K < 1 or N < 1:
        raise ValueError(f"N and K must be >= 1, got N={N}, K={K}")
    if K > N:
        raise ValueError(f"K={K} exceeds N={N}")
    if S < 1:
        raise ValueError(f"stride S must be >= 1, got {S}")
    if S > K:
        raise ValueError(f"stride S={S} exceeds window K={K}; positions would never be scored")
    out = []
    start = N - K
    while start > 0:
        out.append((start, start + K))
        start -= S
    out.append((0, K))
    return out


def finalized_ranges(schedule: list[tuple[int, int]]) -> list[tuple[int, int]]:
    """Positions each pass finalizes: down to the next window's end, all of the last window."""
    out = []
    for n, (s, e) in enumerate(schedule):
        lo = schedule[n + 1][1] if n + 1 < len(schedule) else 0
        out.append((lo, e))
    return out


def sliding_order(
    items: list, score_fn: Callable[[list], np.ndarray], K: int, S: int, merge: str = "freeze"
) -> tuple[list, list[float], list[tuple[int, int]]]:
    """Run the sliding schedule over ``items`` with an arbitrary scorer.

    ``merge='freeze'``: each pass sorts its window in place and its trailing
    positions are final.  ``merge='overwrite'``: every pass only updates
    scores; the full list is sorted once by each item's latest score.
    """
    if merge not in ("freeze", "overwrite"):
        raise ValueError(f"merge must be 'freeze' or 'overwrite', got {merge!r}")
    N = len(items)
    sched = window_schedule(N, K, S)
    work = list(range(N))
    last = np.zeros(N)
    for s, e in sched:
        window = work[s:e]
        sc = np.asarray(score_fn([items[i] for i in window]), np.float64)
        if sc.shape != (len(window),):
            raise ShapeError(f"scorer returned shape {sc.shape} for a window of {len(window)}")
        last[window] = sc
        if merge == "freeze":
            work[s:e] = [window[j] for j in _stable_desc(sc)]
    if merge == "overwrite":
        work = [work[j] for j in _stable_desc(last[work])]
    return [items[i] for i in work], [float(last[i]) for i in work], sched


def sliding_rerank(
    model: RerankerModel | None,
    query: LocalDescriptorSet,
    gallery: list[LocalDescriptorSet],
    K: int,
    S: int,
    mode: AggregatorMode = DEFAULT_AGGREGATOR,
    merge: str = "freeze",
    scorer: Scorer | None = None,
    shuffle_rng: np.random.Generator | None = None,
) -> RerankResult:
    """Re-rank N >= K images with windows of K and stride S.

    Each entry carries the score from the last pass that saw it, so scores
    from different windows need not be mutually sorted.
    """
    if scorer is None:
        if model is None:
            raise ValueError("need a model or a scorer")
        if model.config.K != K:
            raise ShapeError(f"model was built for K={model.config.K}, sliding window K={K}")
        scorer = model_scorer(model, query, AggregatorMode.parse(mode), shuffle_rng)
    ordered, scores, sched = sliding_order(list(gallery), scorer, K, S, merge)
    return RerankResult(query.image_id, [(g.image_id, s) for g, s in zip(ordered, scores)], window_log=sched)


def stub_scorer(values: dict[str, float]) -> Scorer:
    """Scores looked up by image id; handy for protocol checks without a model."""
    return lambda gallery: np.array([values[g.image_id] for g in gallery], np.float64)


__all__ = [
    "AggregatorMode",
    "DEFAULT_AGGREGATOR",
    "RerankResult",
    "aggregate",
    "finalized_ranges",
    "model_scorer",
    "read_results",
    "rerank_once",
    "score_gallery",
    "sliding_order",
    "sliding_rerank",
    "stub_scorer",
    "window_schedule",
    "write_results",
]
