"""Token sequence assembly for one query and K gallery images.

Layout: ``[query tokens, SEP, gallery_1 tokens, SEP, ..., gallery_K tokens, SEP]``
so M = (L+1)(K+1).  Each token embedding is the (projected) descriptor or the
learnable SEP vector, plus a per-position and a per-image learnable encoding.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from .errors import ShapeError
from .numerics import Var, add, linear, masked_rows, take_rows
from .store import LocalDescriptorSet


class Role(IntEnum):
    QUERY = 0
    GALLERY = 1
    SEP = 2


@dataclass(frozen=True)
class TokenMeta:
    """Per-token metadata as parallel arrays of length M."""

    role: np.ndarray
    image_slot: np.ndarray
    within_image_index: np.ndarray
    is_padding: np.ndarray

    def __len__(self) -> int:
        return len(self.role)

    @property
    def L(self) -> int:
        return int(self.within_image_index.max())

    @property
    def K(self) -> int:
        return int(self.image_slot.max())

    def sep_index(self, slot: int) -> int:
        return (slot + 1) * (self.L + 1) - 1


def token_meta(L: int, K: int, valid_counts) -> TokenMeta:
    """Metadata for K+1 images with the given valid descriptor counts (query first).

    An image with zero valid descriptors is fully padded, SEP included.
    """
    valid_counts = np.asarray(valid_counts)
    if len(valid_counts) != K + 1:
        raise ShapeError(f"expected {K + 1} valid counts, got {len(valid_counts)}")
    within = np.tile(np.arange(L + 1), K + 1)
    slot = np.repeat(np.arange(K + 1), L + 1)
    role = np.where(slot == 0, Role.QUERY, Role.GALLERY).astype(np.int8)
    role[within == L] = Role.SEP
    vc = valid_counts[slot]
    is_pad = np.where(within == L, vc == 0, within >= vc)
    return TokenMeta(role, slot, within, is_pad)


@dataclass
class PositionalTables:
    sequence_positions: Var  # (M, h)
    image_positions: Var  # (K+1, h)


@dataclass
class TokenSequence:
    embeddings: Var  # (M, h)
    meta: TokenMeta
    loss_mask: np.ndarray  # (M,) 0/1
    K: int
    L: int
    descriptors: np.ndarray  # (M, d) raw descriptor rows, zero at SEP/padding

    @property
    def M(self) -> int:
        return len(self.meta)


def stack_descriptors(query: LocalDescriptorSet, gallery: list[LocalDescriptorSet]) -> tuple[np.ndarray, TokenMeta]:
    L, d = query.L, query.d
    for g in gallery:
        if (g.L, g.d) != (L, d):
            raise ShapeError(f"gallery image {g.image_id!r} has (L, d) = {(g.L, g.d)}, query has {(L, d)}")
    K = len(gallery)
    rows = np.zeros(((L + 1) * (K + 1), d), np.float32)
    for slot, s in enumerate([query, *gallery]):
        base = slot * (L + 1)
        rows[base : base + s.valid_count] = s.descriptors[: s.valid_count]
    meta = token_meta(L, K, [query.valid_count, *(g.valid_count for g in gallery)])
    return rows, meta


def assemble(
    query: LocalDescriptorSet,
    gallery: list[LocalDescriptorSet],
    proj: Var | None,
    tables: PositionalTables,
    sep_embedding: Var,
) -> TokenSequence:
    rows, meta = stack_descriptors(query, gallery)
    K, L = len(gallery), query.L
    M = rows.shape[0]
    n_pos, h = tables.sequence_positions.shape
    if tables.image_positions.shape[0] != K + 1:
        raise ShapeError(
            f"gallery has K={K} images but the image-position table has {tables.image_positions.shape[0]} rows"
        )
    if n_pos < M:
        raise ShapeError(f"sequence of {M} tokens exceeds the {n_pos}-row position table")
    dtype = tables.sequence_positions.dtype
    x = Var(rows.astype(dtype, copy=False))
    if proj is None:
        if query.d != h:
            raise ShapeError(f"descriptor dim {query.d} differs from hidden size {h} and no projection given")
    else:
        x = linear(x, proj)
    emb = add(x, masked_rows(sep_embedding, meta.role == Role.SEP))
    emb = add(emb, take_rows(tables.sequence_positions, np.arange(M)))
    emb = add(emb, take_rows(tables.image_positions, meta.image_slot))
    loss_mask = ((meta.image_slot > 0) & ~meta.is_padding).astype(np.float32)
    return TokenSequence(emb, meta, loss_mask, K, L, rows)


def shuffle_gallery(gallery: list, labels, rng: np.random.Generator):
    """Apply one uniform random permutation to the gallery list and its labels.

    Returns ``(gallery, labels, perm)`` where ``new[i] = old[perm[i]]``.
    """
    if len(gallery) == 0:
        raise ValueError("gallery must be nonempty")
    perm = rng.permutation(len(gallery))
    new_gallery = [gallery[p] for p in perm]
    new_labels = None if labels is None else np.asarray(labels)[perm]
    return new_gallery, new_labels, perm


def invert_permutation(perm: np.ndarray) -> np.ndarray:
    inv = np.empty_like(perm)
    inv[perm] = np.arange(len(perm))
    return inv
