"""Planted-instance descriptor worlds.

Every instance owns a pool of unit "patch" vectors.  Image 0 of an instance
is its anchor (the query-designated image); the others either share patches
with the anchor ("easy" construction) or, with probability
``transitivity_rate``, avoid every anchor patch but share at least one patch
with an easy sibling ("hard" construction).  Unused descriptor slots hold
fresh random unit vectors, and distractor images consist only of those.
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .store import DescriptorBank, LocalDescriptorSet, Manifest, QueryRecord, global_topk, l2_normalize_rows

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class WorldConfig:
    instance_count: int = 20
    images_per_instance: int = 6
    distractor_images: int = 40
    d: int = 32
    L: int = 8
    patch_pool_per_instance: int = 6
    patches_per_image: int = 3
    noise_sigma: float = 0.05
    transitivity_rate: float = 0.2
    easy_fraction: float = 0.0
    junk_fraction: float = 0.0
    seed: int = 0

    def __post_init__(self):
        for name in ("instance_count", "images_per_instance", "d", "L", "patch_pool_per_instance", "patches_per_image"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.distractor_images < 0:
            raise ValueError(f"distractor_images must be >= 0, got {self.distractor_images}")
        if self.patches_per_image > self.L:
            raise ValueError(f"patches_per_image ({self.patches_per_image}) must not exceed L ({self.L})")
        if self.patch_pool_per_instance < self.patches_per_image:
            raise ValueError(
                f"patch_pool_per_instance ({self.patch_pool_per_instance}) is smaller than "
                f"patches_per_image ({self.patches_per_image})"
            )
        if self.noise_sigma < 0:
            raise ValueError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        for name in ("transitivity_rate", "easy_fraction", "junk_fraction"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.easy_fraction + self.junk_fraction > 1.0:
            raise ValueError("easy_fraction + junk_fraction must not exceed 1")

    @classmethod
    def from_dict(cls, doc: dict) -> "WorldConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown WorldConfig field(s): {', '.join(sorted(unknown))}")
        return cls(**doc)

    @classmethod
    def from_json(cls, path) -> "WorldConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class WorldTruth:
    """Instance labels (None for distractors) plus generation bookkeeping."""

    labels: dict[str, int | None]
    hard: set[str] = field(default_factory=set)
    anchors: dict[int, str] = field(default_factory=dict)
    patch_ids: dict[str, list[int]] = field(default_factory=dict)  # global patch ids per image
    easy_fraction: float = 0.0
    junk_fraction: float = 0.0
    seed: int = 0

    def same_instance(self, a: str, b: str) -> bool:
        la = self.labels.get(a)
        return la is not None and la == self.labels.get(b)

    def tier(self, query_id: str, image_id: str) -> str:
        """Relevance of ``image_id`` for ``query_id``.

        Same-instance images are positive, except that a deterministic
        fraction (keyed on the pair) is relabelled easy or junk.
        """
        if image_id == query_id or not self.same_instance(query_id, image_id):
            return "negative"
        if self.easy_fraction == 0.0 and self.junk_fraction == 0.0:
            return "positive"
        u = _pair_uniform(self.seed, query_id, image_id)
        if u < self.easy_fraction:
            return "easy"
        if u < self.easy_fraction + self.junk_fraction:
            return "junk"
        return "positive"

    def relevance(self, query_id: str, ids) -> dict[str, str]:
        out = {}
        for iid in ids:
            t = self.tier(query_id, iid)
            if t != "negative":
                out[iid] = t
        return out

    def to_json(self) -> dict:
        return {
            "labels": self.labels,
            "hard": sorted(self.hard),
            "anchors": {str(k): v for k, v in self.anchors.items()},
            "patch_ids": self.patch_ids,
            "easy_fraction": self.easy_fraction,
            "junk_fraction": self.junk_fraction,
            "seed": self.seed,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "WorldTruth":
        return cls(
            labels=dict(doc["labels"]),
            hard=set(doc.get("hard", [])),
            anchors={int(k): v for k, v in doc.get("anchors", {}).items()},
            patch_ids={k: list(v) for k, v in doc.get("patch_ids", {}).items()},
            easy_fraction=doc.get("easy_fraction", 0.0),
            junk_fraction=doc.get("junk_fraction", 0.0),
            seed=doc.get("seed", 0),
        )

    def instances(self) -> dict[int, list[str]]:
        groups: dict[int, list[str]] = {}
        for iid, lab in self.labels.items():
            if lab is not None:
                groups.setdefault(lab, []).append(iid)
        return groups


def _pair_uniform(seed: int, a: str, b: str) -> float:
    h = np.frombuffer(f"{a}|{b}".encode(), dtype=np.uint8)
    ss = np.random.SeedSequence([seed & 0xFFFFFFFFFFFFFFFF, *h.tolist()])
    return float(np.random.default_rng(ss).random())


def _unit_rows(rng: np.random.Generator, n: int, d: int) -> np.ndarray:
    x = rng.standard_normal((n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def _image(rng, cfg: WorldConfig, patches: np.ndarray, image_id: str) -> LocalDescriptorSet:
    """Noisy patches plus random fill, shuffled, with descending weights."""
    k = patches.shape[0]
    rows = np.empty((cfg.L, cfg.d))
    noisy = patches + cfg.noise_sigma * rng.standard_normal(patches.shape) if cfg.noise_sigma > 0 else patches
    rows[:k] = noisy
    rows[k:] = _unit_rows(rng, cfg.L - k, cfg.d)
    rows = rows[rng.permutation(cfg.L)]
    weights = np.sort(rng.random(cfg.L))[::-1]
    return LocalDescriptorSet(image_id, l2_normalize_rows(rows), weights.astype(np.float32), cfg.L)


def generate_world(cfg: WorldConfig) -> tuple[DescriptorBank, WorldTruth]:
    """Build a bank (with global descriptors) and its ground truth from ``cfg``.

    Pure function of ``cfg``: each instance draws from its own child seed.
    """
    root = np.random.SeedSequence(cfg.seed)
    inst_seeds = root.spawn(cfg.instance_count + 1)
    bank = DescriptorBank(d=cfg.d, L=cfg.L, source=f"synthetic:seed={cfg.seed}")
    truth = WorldTruth(labels={}, easy_fraction=cfg.easy_fraction, junk_fraction=cfg.junk_fraction, seed=cfg.seed)
    P, k = cfg.patch_pool_per_instance, cfg.patches_per_image

    for c in range(cfg.instance_count):
        rng = np.random.default_rng(inst_seeds[c])
        pool = _unit_rows(rng, P, cfg.d)
        # patch 0 is the instance signature: every easy image carries it,
        # so any two easy images of an instance overlap
        anchor = [0, *(1 + rng.choice(P - 1, size=k - 1, replace=False)).tolist()]
        anchor_set = set(anchor)
        outside = [p for p in range(P) if p not in anchor_set]
        chosen: list[list[int]] = [anchor]
        easy_members: list[int] = []
        for j in range(1, cfg.images_per_instance):
            want_hard = j >= 2 and rng.random() < cfg.transitivity_rate
            bridges = [p for e in easy_members for p in chosen[e] if p not in anchor_set]
            if want_hard and bridges:
                bridge = bridges[rng.integers(len(bridges))]
                rest = [p for p in outside if p != bridge]
                take = min(k - 1, len(rest))
                extra = rng.choice(rest, size=take, replace=False).tolist() if take else []
                chosen.append([bridge, *extra])
                truth.hard.add(f"i{c:03d}_{j:02d}")
            else:
                if want_hard:
                    log.debug("instance %d image %d: no bridge patch available, generated easy", c, j)
                if j == 1 and outside and k >= 2:
                    # first sibling guarantees a bridge patch outside the anchor set
                    bridge = outside[rng.integers(len(outside))]
                    rest = [p for p in range(1, P) if p != bridge]
                    extra = rng.choice(rest, size=k - 2, replace=False).tolist()
                    ids = [0, bridge, *extra]
                else:
                    ids = [0, *(1 + rng.choice(P - 1, size=k - 1, replace=False)).tolist()]
                chosen.append(ids)
                easy_members.append(j)
        truth.anchors[c] = f"i{c:03d}_00"
        for j, ids in enumerate(chosen):
            iid = f"i{c:03d}_{j:02d}"
            dset = _image(rng, cfg, pool[ids], iid)
            bank.add(dset, _global_of(dset))
            truth.labels[iid] = c
            truth.patch_ids[iid] = [c * P + p for p in ids]

    rng = np.random.default_rng(inst_seeds[-1])
    for n in range(cfg.distractor_images):
        iid = f"d{n:04d}"
        dset = _image(rng, cfg, np.zeros((0, cfg.d)), iid)
        bank.add(dset, _global_of(dset))
        truth.labels[iid] = None
        truth.patch_ids[iid] = []
    return bank, truth


def _global_of(dset: LocalDescriptorSet) -> np.ndarray:
    m = dset.descriptors[: dset.valid_count].astype(np.float64).mean(axis=0)
    n = np.linalg.norm(m)
    return (m / n if n > 0 else m).astype(np.float32)


def split_world(truth: WorldTruth, train_fraction: float, seed: int) -> tuple[list[str], list[str]]:
    """Stratified split: each instance contributes round(n * fraction) images to train.

    Distractors are split at the same fraction.  A single-image instance
    cannot be stratified and goes to train with a warning.
    """
    if not 0.0 < train_fraction < 1.0:
        raise ValueError(f"train_fraction must lie in (0, 1), got {train_fraction}")
    rng = np.random.default_rng(seed)
    train: list[str] = []
    evals: list[str] = []
    groups = truth.instances()
    distractors = sorted(i for i, lab in truth.labels.items() if lab is None)
    for lab in sorted(groups):
        members = sorted(groups[lab])
        if len(members) == 1:
            warnings.warn(f"instance {lab} has a single image; assigned to train", stacklevel=2)
            train.extend(members)
            continue
        n_train = int(np.clip(np.floor(len(members) * train_fraction + 0.5), 1, len(members) - 1))
        perm = rng.permutation(len(members))
        train.extend(members[p] for p in perm[:n_train])
        evals.extend(members[p] for p in perm[n_train:])
    if distractors:
        perm = rng.permutation(len(distractors))
        n_train = int(np.floor(len(distractors) * train_fraction + 0.5))
        train.extend(distractors[p] for p in perm[:n_train])
        evals.extend(distractors[p] for p in perm[n_train:])
    return sorted(train), sorted(evals)


def build_manifest(bank: DescriptorBank, truth: WorldTruth, ids, queries=None) -> Manifest:
    """Queries = non-distractor images in ``ids``; gallery = full global ranking of the rest."""
    ids = list(ids)
    if queries is None:
        queries = [i for i in ids if truth.labels.get(i) is not None]
    records = []
    for q in queries:
        short = global_topk(bank.globals[q], bank, len(ids) - (q in ids), exclude={q}, candidates=ids)
        records.append(QueryRecord(q, short.ids, truth.relevance(q, short.ids)))
    return Manifest(records)
