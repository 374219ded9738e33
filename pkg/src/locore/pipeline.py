"""Glue: re-rank every query of a manifest and compare against the global order."""

from __future__ import annotations

import numpy as np

from .inference import DEFAULT_AGGREGATOR, RerankResult, rerank_once, sliding_rerank
from .metrics import Protocol, baseline_results, evaluate
from .model import RerankerModel
from .store import DescriptorBank, LocalDescriptorSet, Manifest
from .trainer import PAD_ID


def rerank_query(
    model: RerankerModel,
    bank: DescriptorBank,
    query_id: str,
    gallery_ids: list[str],
    N: int | None = None,
    S: int | None = None,
    mode=DEFAULT_AGGREGATOR,
    merge: str = "freeze",
    shuffle_rng: np.random.Generator | None = None,
) -> RerankResult:
    """Re-rank the first N ids (N defaults to K) with windows of K and stride S.

    Lists shorter than K are padded with empty images that are dropped
    from the result.
    """
    K = model.config.K
    N = K if N is None else N
    S = K if S is None else S
    head = list(gallery_ids[:N])
    query = bank.local[query_id]
    gallery = [bank.local[g] for g in head]
    n_pad = max(0, K - len(gallery))
    gallery += [LocalDescriptorSet.empty(bank.L, bank.d, PAD_ID)] * n_pad
    if len(gallery) == K:
        res = rerank_once(model, query, gallery, mode, shuffle_rng)
    else:
        res = sliding_rerank(model, query, gallery, K, S, mode, merge, shuffle_rng=shuffle_rng)
    if n_pad:
        res.entries = [e for e in res.entries if e[0] != PAD_ID]
        res.padded = [p for p in res.padded if p != PAD_ID]
    return res


def rerank_manifest(
    model: RerankerModel,
    bank: DescriptorBank,
    manifest: Manifest,
    N: int | None = None,
    S: int | None = None,
    mode=DEFAULT_AGGREGATOR,
    merge: str = "freeze",
    shuffle_seed: int | None = None,
) -> list[RerankResult]:
    out = []
    for n, q in enumerate(manifest.queries):
        rng = None if shuffle_seed is None else np.random.default_rng([shuffle_seed, n])
        out.append(rerank_query(model, bank, q.query_id, q.gallery, N, S, mode, merge, rng))
    return out


def compare_to_baseline(
    model: RerankerModel,
    bank: DescriptorBank,
    manifest: Manifest,
    protocol=Protocol.MEDIUM,
    **kw,
) -> tuple[float, float]:
    """(baseline mAP, re-ranked mAP) on ``manifest``."""
    base = evaluate(baseline_results(manifest), manifest, protocol)
    rr = evaluate(rerank_manifest(model, bank, manifest, **kw), manifest, protocol)
    return base.mAP, rr.mAP
