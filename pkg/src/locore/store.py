"""Descriptor banks, shortlists and query manifests.

Bank file layout (little-endian)::

    "LCRB" | version u32 | flags u32 | d u32 | L u32 | count u64
    per image: id_len u16 | id utf-8 | L*d f32 | [L f32 weights] | [D u32 | D f32 global]

flags: bit0 descriptors normalized, bit1 weights present, bit2 globals present.
Padding rows are all-zero and always trail the valid rows, so ``valid_count``
is recovered on read as the number of nonzero rows.
"""

from __future__ import annotations

import json
import logging
import os
import struct
import tempfile
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    BadMagicError,
    InconsistentShapeError,
    TruncatedPayloadError,
    VersionMismatchError,
)

log = logging.getLogger(__name__)

MAGIC = b"LCRB"
FORMAT_VERSION = 1
FLAG_NORMALIZED = 1
FLAG_WEIGHTS = 2
FLAG_GLOBALS = 4
_HEADER = struct.Struct("<4sIIIIQ")

TIERS = ("positive", "easy", "junk", "negative")


def l2_normalize_rows(x: np.ndarray) -> np.ndarray:
    """Normalize nonzero rows to unit length; zero rows stay zero."""
    x = np.asarray(x, dtype=np.float32)
    norms = np.linalg.norm(x.astype(np.float64), axis=1, keepdims=True)
    safe = np.where(norms > 0, norms, 1.0)
    return (x / safe).astype(np.float32)


@dataclass
class LocalDescriptorSet:
    image_id: str
    descriptors: np.ndarray  # (L, d) float32, padded rows zero
    weights: np.ndarray | None = None  # (L,)
    valid_count: int | None = None

    def __post_init__(self):
        self.descriptors = np.asarray(self.descriptors, dtype=np.float32)
        if self.descriptors.ndim != 2:
            raise ValueError(f"descriptors for {self.image_id!r} must be 2-D, got {self.descriptors.shape}")
        if self.weights is not None:
            self.weights = np.asarray(self.weights, dtype=np.float32)
            if self.weights.shape != (self.descriptors.shape[0],):
                raise ValueError(f"weights for {self.image_id!r} have shape {self.weights.shape}")
        if self.valid_count is None:
            nonzero = np.any(self.descriptors != 0, axis=1)
            self.valid_count = int(nonzero.sum())

    @property
    def L(self) -> int:
        return self.descriptors.shape[0]

    @property
    def d(self) -> int:
        return self.descriptors.shape[1]

    @classmethod
    def empty(cls, L: int, d: int, image_id: str = "") -> "LocalDescriptorSet":
        """A fully padded set (valid_count 0)."""
        return cls(image_id, np.zeros((L, d), np.float32), np.zeros(L, np.float32), 0)

    def same_as(self, other: "LocalDescriptorSet") -> bool:
        return (
            self.image_id == other.image_id
            and self.valid_count == other.valid_count
            and _bits_equal(self.descriptors, other.descriptors)
            and _bits_equal(self.weights, other.weights)
        )


@dataclass
class GlobalDescriptor:
    image_id: str
    vector: np.ndarray

    def __post_init__(self):
        self.vector = np.asarray(self.vector, dtype=np.float32).reshape(-1)


@dataclass
class DescriptorBank:
    """Local descriptor sets keyed by image id, plus optional global vectors."""

    d: int
    L: int
    local: dict[str, LocalDescriptorSet] = field(default_factory=dict)
    globals: dict[str, GlobalDescriptor] = field(default_factory=dict)
    source: str = ""

    def __len__(self) -> int:
        return len(self.local)

    @property
    def ids(self) -> list[str]:
        return list(self.local)

    @property
    def has_weights(self) -> bool:
        return bool(self.local) and all(s.weights is not None for s in self.local.values())

    @property
    def has_globals(self) -> bool:
        return bool(self.globals)

    def add(self, dset: LocalDescriptorSet, global_vector: np.ndarray | None = None) -> None:
        if dset.image_id in self.local:
            raise ValueError(f"duplicate image id {dset.image_id!r}")
        if (dset.L, dset.d) != (self.L, self.d):
            raise ValueError(
                f"image {dset.image_id!r} has (L, d) = {(dset.L, dset.d)}, bank expects {(self.L, self.d)}"
            )
        self.local[dset.image_id] = dset
        if global_vector is not None:
            self.globals[dset.image_id] = GlobalDescriptor(dset.image_id, global_vector)

    def validate(self) -> None:
        """Raise ValueError if a bank invariant is violated."""
        for iid, s in self.local.items():
            if iid != s.image_id:
                raise ValueError(f"key {iid!r} does not match image id {s.image_id!r}")
            if (s.L, s.d) != (self.L, self.d):
                raise ValueError(f"image {iid!r} has shape {(s.L, s.d)}, expected {(self.L, self.d)}")
            valid = s.descriptors[: s.valid_count].astype(np.float64)
            if np.any(np.abs(np.linalg.norm(valid, axis=1) - 1.0) > 1e-5):
                raise ValueError(f"image {iid!r} has descriptors that are not L2-normalized")
            if np.any(s.descriptors[s.valid_count:] != 0):
                raise ValueError(f"image {iid!r} has nonzero padding rows")
        if self.globals:
            if set(self.globals) != set(self.local):
                raise ValueError("global descriptors must cover exactly the local-set ids")
            dims = {g.vector.shape[0] for g in self.globals.values()}
            if len(dims) != 1:
                raise ValueError(f"global descriptors have mixed dimensions {sorted(dims)}")
        weights = [s.weights is not None for s in self.local.values()]
        if any(weights) and not all(weights):
            raise ValueError("weights must be present for all images or none")

    def same_as(self, other: "DescriptorBank") -> bool:
        """Bitwise equality of contents (source tag excluded)."""
        if (self.d, self.L) != (other.d, other.L) or list(self.local) != list(other.local):
            return False
        if set(self.globals) != set(other.globals):
            return False
        return all(self.local[k].same_as(other.local[k]) for k in self.local) and all(
            _bits_equal(self.globals[k].vector, other.globals[k].vector) for k in self.globals
        )

    def subset(self, ids) -> "DescriptorBank":
        out = DescriptorBank(self.d, self.L, source=self.source)
        for iid in ids:
            out.local[iid] = self.local[iid]
            if iid in self.globals:
                out.globals[iid] = self.globals[iid]
        return out


def _bits_equal(a, b) -> bool:
    if a is None or b is None:
        return a is None and b is None
    return a.shape == b.shape and a.dtype == b.dtype and a.tobytes() == b.tobytes()


# ---------------------------------------------------------------------------
# file I/O
# ---------------------------------------------------------------------------


def _atomic_write(path: Path, payload: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode_bank(bank: DescriptorBank) -> bytes:
    bank.validate()
    flags = FLAG_NORMALIZED
    if bank.has_weights:
        flags |= FLAG_WEIGHTS
    if bank.has_globals:
        flags |= FLAG_GLOBALS
    parts = [_HEADER.pack(MAGIC, FORMAT_VERSION, flags, bank.d, bank.L, len(bank))]
    for iid, s in bank.local.items():
        raw = iid.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(s.descriptors.astype("<f4").tobytes())
        if flags & FLAG_WEIGHTS:
            parts.append(s.weights.astype("<f4").tobytes())
        if flags & FLAG_GLOBALS:
            vec = bank.globals[iid].vector
            parts.append(struct.pack("<I", vec.shape[0]))
            parts.append(vec.astype("<f4").tobytes())
    return b"".join(parts)


def write_bank(bank: DescriptorBank, path) -> None:
    """Write ``bank`` atomically; refuses banks that fail validation."""
    _atomic_write(Path(path), encode_bank(bank))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedPayloadError(
                f"truncated payload reading {what}: need {n} bytes at offset {self.pos}, file has {len(self.buf)}"
            )
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out


def decode_bank(buf: bytes, source: str = "") -> DescriptorBank:
    r = _Reader(buf)
    if buf[:4] != MAGIC:
        raise BadMagicError(f"bad magic {buf[:4]!r}, expected {MAGIC!r}")
    head = r.take(_HEADER.size, "header")
    magic, version, flags, d, L, count = _HEADER.unpack(head)
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"bank format version {version}, reader supports {FORMAT_VERSION}")
    if count and (d == 0 or L == 0):
        raise InconsistentShapeError(f"header declares {count} images with (L, d) = ({L}, {d})")
    bank = DescriptorBank(d=d, L=L, source=source)
    gdim = None
    for k in range(count):
        (n,) = struct.unpack("<H", r.take(2, f"id length of image {k}"))
        iid = r.take(n, f"id of image {k}").decode("utf-8")
        desc = np.frombuffer(r.take(4 * L * d, f"descriptors of {iid!r}"), "<f4").reshape(L, d).astype(np.float32)
        weights = None
        if flags & FLAG_WEIGHTS:
            weights = np.frombuffer(r.take(4 * L, f"weights of {iid!r}"), "<f4").astype(np.float32)
        vec = None
        if flags & FLAG_GLOBALS:
            (D,) = struct.unpack("<I", r.take(4, f"global dim of {iid!r}"))
            if gdim is None:
                gdim = D
            elif D != gdim:
                raise InconsistentShapeError(f"image {iid!r} has global dim {D}, earlier images {gdim}")
            vec = np.frombuffer(r.take(4 * D, f"global of {iid!r}"), "<f4").astype(np.float32)
        if not flags & FLAG_NORMALIZED:
            desc = l2_normalize_rows(desc)
            if vec is not None:
                vec = l2_normalize_rows(vec[None, :])[0]
        nonzero = np.any(desc != 0, axis=1)
        valid = int(nonzero.sum())
        if not np.all(nonzero[:valid]):
            raise InconsistentShapeError(f"image {iid!r} has zero rows before its last valid row")
        if iid in bank.local:
            raise InconsistentShapeError(f"duplicate image id {iid!r}")
        bank.add(LocalDescriptorSet(iid, desc, weights, valid), vec)
    if r.pos != len(buf):
        raise InconsistentShapeError(
            f"{len(buf) - r.pos} trailing bytes after {count} images; payload does not match (L, d) = ({L}, {d})"
        )
    return bank


def read_bank(path) -> DescriptorBank:
    path = Path(path)
    return decode_bank(path.read_bytes(), source=str(path))


# ---------------------------------------------------------------------------
# ingestion and search
# ---------------------------------------------------------------------------


def select_top_L(raw: np.ndarray, weights: np.ndarray, L: int, image_id: str = "") -> LocalDescriptorSet:
    """Keep the ``L`` highest-weight rows (ties by original index), L2-normalized.

    Fewer than ``L`` rows are padded with zeros and ``valid_count`` records
    the real count.
    """
    if L <= 0:
        raise ValueError(f"L must be positive, got {L}")
    raw = np.asarray(raw, dtype=np.float32)
    weights = np.asarray(weights, dtype=np.float64)
    if raw.ndim != 2 or raw.shape[0] < 1:
        raise ValueError(f"raw descriptors must be a nonempty N x d matrix, got {raw.shape}")
    if weights.shape != (raw.shape[0],) or not np.all(np.isfinite(weights)):
        raise ValueError("weights must be finite with one entry per descriptor")
    order = np.lexsort((np.arange(len(weights)), -weights))[:L]
    n = len(order)
    if np.any(np.linalg.norm(raw[order], axis=1) == 0):
        raise ValueError(f"image {image_id!r}: selected descriptor with zero norm cannot be normalized")
    desc = np.zeros((L, raw.shape[1]), np.float32)
    desc[:n] = l2_normalize_rows(raw[order])
    w = np.zeros(L, np.float32)
    w[:n] = weights[order]
    return LocalDescriptorSet(image_id, desc, w, n)


@dataclass
class ShortList:
    query_id: str
    entries: list[tuple[str, float]]
    relevance: dict[str, str] | None = None
    truncated: bool = False  # K exceeded the bank size

    @property
    def ids(self) -> list[str]:
        return [iid for iid, _ in self.entries]


def global_topk(
    query: GlobalDescriptor,
    bank: DescriptorBank,
    K: int,
    exclude: set[str] | frozenset[str] = frozenset(),
    candidates=None,
) -> ShortList:
    """Exact top-K by dot product; ties broken by image id ascending.

    ``candidates`` restricts the search to a subset of ids.  If K exceeds
    the number of candidates the full ranking is returned with
    ``truncated`` set.
    """
    if K < 1:
        raise ValueError(f"K must be >= 1, got {K}")
    if not bank.has_globals:
        raise ValueError("bank has no global descriptors")
    pool = bank.ids if candidates is None else list(candidates)
    ids = [i for i in pool if i not in exclude]
    if not ids:
        return ShortList(query.image_id, [], truncated=True)
    mat = np.stack([bank.globals[i].vector for i in ids]).astype(np.float64)
    scores = mat @ query.vector.astype(np.float64)
    order = sorted(range(len(ids)), key=lambda j: (-scores[j], ids[j]))
    truncated = K > len(ids)
    if truncated:
        warnings.warn(f"K={K} exceeds the {len(ids)} candidates; returning the full ranking", stacklevel=2)
    top = order[:K]
    return ShortList(query.image_id, [(ids[j], float(scores[j])) for j in top], truncated=truncated)


# ---------------------------------------------------------------------------
# manifest
# ---------------------------------------------------------------------------


@dataclass
class QueryRecord:
    query_id: str
    gallery: list[str]
    relevance: dict[str, str] = field(default_factory=dict)

    def tier(self, image_id: str) -> str:
        return self.relevance.get(image_id, "negative")


@dataclass
class Manifest:
    queries: list[QueryRecord]
    easy_removed: bool = False

    def __post_init__(self):
        for q in self.queries:
            for iid, t in q.relevance.items():
                if t not in TIERS:
                    raise ValueError(f"query {q.query_id!r}: unknown tier {t!r} for {iid!r}")

    def by_id(self) -> dict[str, QueryRecord]:
        return {q.query_id: q for q in self.queries}

    def without_easy(self) -> "Manifest":
        """Drop easy images from every gallery, as if removed from the database."""
        out = []
        for q in self.queries:
            keep = [g for g in q.gallery if q.tier(g) != "easy"]
            rel = {k: v for k, v in q.relevance.items() if v != "easy"}
            out.append(QueryRecord(q.query_id, keep, rel))
        return Manifest(out, easy_removed=True)

    def to_json(self) -> dict:
        doc = {
            "queries": [
                {"query_id": q.query_id, "gallery": list(q.gallery), "relevance": dict(q.relevance)}
                for q in self.queries
            ]
        }
        if self.easy_removed:
            doc["easy_removed"] = True
        return doc

    @classmethod
    def from_json(cls, doc: dict) -> "Manifest":
        try:
            queries = [
                QueryRecord(q["query_id"], list(q["gallery"]), dict(q.get("relevance", {})))
                for q in doc["queries"]
            ]
        except (KeyError, TypeError) as exc:
            raise ValueError(f"malformed manifest: {exc}") from exc
        return cls(queries, easy_removed=bool(doc.get("easy_removed", False)))


def write_manifest(manifest: Manifest, path) -> None:
    _atomic_write(Path(path), json.dumps(manifest.to_json(), indent=1).encode("utf-8"))


def read_manifest(path) -> Manifest:
    return Manifest.from_json(json.loads(Path(path).read_text()))
