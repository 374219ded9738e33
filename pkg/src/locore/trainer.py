"""List-wise training: shortlist sampling, shuffled batches, masked BCE, accumulation."""

from __future__ import annotations

import json
import logging
import math
import sys
import warnings
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import NonFiniteLossError, ShapeError
from .model import RerankerModel, assemble_for, forward, pattern_for, save_checkpoint
from .numerics import OptimizerState, Tape, adamw_step, bce_with_logits
from .sequence import shuffle_gallery
from .store import DescriptorBank, LocalDescriptorSet, Manifest, ShortList, global_topk
from .synth import WorldTruth

log = logging.getLogger(__name__)

PAD_ID = ""  # gallery id of a padded (empty, fully masked) image


class ManifestTruth:
    """Relevance lookups backed by a manifest instead of generator output."""

    def __init__(self, manifest: Manifest):
        self._records = manifest.by_id()
        self.labels = {q: 0 for q in self._records}

    def tier(self, query_id: str, image_id: str) -> str:
        rec = self._records.get(query_id)
        return "negative" if rec is None else rec.tier(image_id)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 5e-5
    weight_decay: float = 0.0
    micro_batch_size: int = 8
    accumulation_steps: int = 4
    epochs: int | None = None  # None: one epoch, or as many as max_steps needs
    max_steps: int | None = None
    seed: int = 0
    shuffle_enabled: bool = True
    ensure_positive: bool = False
    warmup_steps: int = 0
    eval_every: int = 0
    checkpoint_every: int = 0
    recompute_shortlists: bool = False

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be >= 0, got {self.weight_decay}")
        for name in ("micro_batch_size", "accumulation_steps", "epochs"):
            if getattr(self, name) is not None and getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.max_steps is not None and self.max_steps < 0:
            raise ValueError("max_steps must be >= 0")

    @property
    def epoch_limit(self) -> int:
        if self.epochs is not None:
            return self.epochs
        return 1 if self.max_steps is None else sys.maxsize

    @property
    def samples_per_step(self) -> int:
        return self.micro_batch_size * self.accumulation_steps

    def lr_at(self, step: int) -> float:
        if self.warmup_steps <= 0:
            return self.lr
        return self.lr * min(1.0, (step + 1) / self.warmup_steps)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown TrainConfig field(s): {', '.join(sorted(unknown))}")
        return cls(**doc)

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class TrainSample:
    query_id: str
    gallery_ids: list[str]  # PAD_ID marks padding
    image_labels: np.ndarray  # (K,) 0/1
    query: LocalDescriptorSet
    gallery: list[LocalDescriptorSet]
    permutation: np.ndarray  # new[i] = old[permutation[i]]

    @property
    def K(self) -> int:
        return len(self.gallery_ids)

    @property
    def padded(self) -> np.ndarray:
        return np.array([g == PAD_ID for g in self.gallery_ids])

    def token_labels(self) -> np.ndarray:
        """Image labels broadcast over each gallery block, query block zero; length M."""
        L1 = self.query.L + 1
        return np.concatenate([np.zeros(L1), np.repeat(self.image_labels.astype(np.float64), L1)])

    def shuffled(self, rng: np.random.Generator) -> "TrainSample":
        gal, labels, perm = shuffle_gallery(list(zip(self.gallery_ids, self.gallery)), self.image_labels, rng)
        return TrainSample(
            self.query_id,
            [g[0] for g in gal],
            labels,
            self.query,
            [g[1] for g in gal],
            self.permutation[perm],
        )


def training_shortlist(bank: DescriptorBank, query_id: str, K: int, train_ids) -> ShortList:
    return global_topk(bank.globals[query_id], bank, K, exclude={query_id}, candidates=train_ids)


def sample_training_list(
    bank: DescriptorBank,
    truth: "WorldTruth | ManifestTruth",
    query_id: str,
    K: int,
    train_ids=None,
    shortlist: ShortList | None = None,
) -> TrainSample:
    """Top-K train images by global similarity, labelled positive (1) or not (0).

    Short lists are padded with empty images, which the loss mask ignores.
    """
    if train_ids is None:
        train_ids = bank.ids
    train_ids = list(train_ids)
    if not train_ids:
        raise ValueError("train split is empty")
    if not bank.has_globals:
        raise ValueError("bank lacks global descriptors")
    if shortlist is None:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            shortlist = training_shortlist(bank, query_id, K, train_ids)
    ids = shortlist.ids[:K]
    labels = [1 if truth.tier(query_id, i) == "positive" else 0 for i in ids]
    gallery = [bank.local[i] for i in ids]
    n_pad = K - len(ids)
    if n_pad:
        empty = LocalDescriptorSet.empty(bank.L, bank.d, PAD_ID)
        ids = ids + [PAD_ID] * n_pad
        labels += [0] * n_pad
        gallery += [empty] * n_pad
    return TrainSample(query_id, ids, np.array(labels, np.int8), bank.local[query_id], gallery, np.arange(K))


def _step_rng(seed: int, step: int) -> np.random.Generator:
    return np.random.default_rng([seed, step])


def sample_loss(model: RerankerModel, sample: TrainSample, rng: np.random.Generator | None, mode: str = "train"):
    """Forward one sample under the active tape; returns the loss Var."""
    seq = assemble_for(model, sample.query, sample.gallery)
    out = forward(model, seq, pattern_for(model, seq.meta), mode=mode, rng=rng)
    return bce_with_logits(out.node, sample.token_labels(), seq.loss_mask)


def train_step(
    model: RerankerModel,
    batch: list[TrainSample],
    state: OptimizerState,
    cfg: TrainConfig,
    rng: np.random.Generator | None = None,
) -> tuple[float, RerankerModel, OptimizerState]:
    """One optimizer update from ``batch``.

    The batch is cut into ``cfg.accumulation_steps`` micro-batches; each
    micro-batch gradient is a per-sample mean, and the update uses the mean
    of those.  On a non-finite loss nothing is changed and
    :class:`NonFiniteLossError` is raised.
    """
    if not batch:
        raise ValueError("empty batch")
    K = model.config.K
    for s in batch:
        if s.K != K:
            raise ShapeError(f"sample {s.query_id!r} has K={s.K}, model expects {K}")
    if rng is None:
        rng = _step_rng(cfg.seed, state.step)
    chunks = [c for c in np.array_split(np.arange(len(batch)), min(cfg.accumulation_steps, len(batch))) if len(c)]
    model.zero_grad()
    losses = []
    for chunk in chunks:
        weight = 1.0 / (len(chunk) * len(chunks))
        for i in chunk:
            sample = batch[i].shuffled(rng) if cfg.shuffle_enabled else batch[i]
            with Tape() as tape:
                loss = sample_loss(model, sample, rng)
                if not np.isfinite(loss.value):
                    model.zero_grad()
                    log.error("non-finite loss %r at step %d (query %s); step aborted", float(loss.value), state.step, sample.query_id)
                    raise NonFiniteLossError(f"non-finite loss at step {state.step} for query {sample.query_id!r}")
                tape.backward(loss, np.asarray(weight, loss.dtype))
            losses.append((float(loss.value), weight))
    grads = model.grads()
    model.zero_grad()
    state = replace(state, lr=cfg.lr_at(state.step), weight_decay=cfg.weight_decay)
    new_params, new_state = adamw_step(model.values(), grads, state)
    model.load_values(new_params)
    mean_loss = sum(l * w for l, w in losses)
    return mean_loss, model, new_state


@dataclass
class TrainResult:
    model: RerankerModel
    state: OptimizerState
    log: list[dict] = field(default_factory=list)


def train(
    model: RerankerModel,
    bank: DescriptorBank,
    truth: "WorldTruth | ManifestTruth",
    cfg: TrainConfig,
    train_ids=None,
    state: OptimizerState | None = None,
    eval_fn: Callable[[RerankerModel], float] | None = None,
    log_path=None,
    checkpoint_path=None,
) -> TrainResult:
    """Epoch loop over train queries in seeded random order.

    ``state`` resumes an earlier run (its ``step`` continues).  Each metrics
    record is ``{step, loss, lr}`` plus ``eval_mAP`` every ``cfg.eval_every``
    steps when ``eval_fn`` is given.
    """
    if train_ids is None:
        train_ids = bank.ids
    train_ids = sorted(train_ids)
    queries = [q for q in train_ids if truth.labels.get(q) is not None]
    if not queries:
        raise ValueError("no train queries")
    K = model.config.K
    if state is None:
        state = OptimizerState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    cache: dict[str, TrainSample] = {}

    def get(q):
        if cfg.recompute_shortlists or q not in cache:
            cache[q] = sample_training_list(bank, truth, q, K, train_ids)
        return cache[q]

    if cfg.ensure_positive:
        queries = [q for q in queries if get(q).image_labels.any()]
        if not queries:
            raise ValueError("ensure_positive left no train queries")

    records: list[dict] = []
    fh = open(log_path, "a") if log_path else None
    start_step = state.step
    try:
        per = cfg.samples_per_step
        n_steps = max(1, math.ceil(len(queries) / per))
        # a resumed state picks up the batch schedule where it stopped
        first_epoch, first_batch = divmod(start_step, n_steps)
        for epoch in range(first_epoch, cfg.epoch_limit):
            order = np.random.default_rng([cfg.seed, 1_000_003, epoch]).permutation(len(queries))
            for b in range(first_batch if epoch == first_epoch else 0, n_steps):
                if cfg.max_steps is not None and state.step - start_step >= cfg.max_steps:
                    return TrainResult(model, state, records)
                idx = order[b * per : (b + 1) * per]
                if len(idx) < per:  # wrap to keep the effective batch size fixed
                    idx = np.concatenate([idx, order[: per - len(idx)]])
                batch = [get(queries[i]) for i in idx]
                loss, model, state = train_step(model, batch, state, cfg)
                rec = {"step": state.step, "loss": loss, "lr": cfg.lr_at(state.step - 1)}
                if eval_fn is not None and cfg.eval_every and state.step % cfg.eval_every == 0:
                    rec["eval_mAP"] = float(eval_fn(model))
                records.append(rec)
                if fh:
                    fh.write(json.dumps(rec) + "\n")
                    fh.flush()
                if checkpoint_path and cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0:
                    save_checkpoint(model, checkpoint_path, *checkpoint_extras(state, cfg))
        return TrainResult(model, state, records)
    finally:
        if fh:
            fh.close()
        if checkpoint_path:
            save_checkpoint(model, checkpoint_path, *checkpoint_extras(state, cfg))


def checkpoint_extras(state: OptimizerState, cfg: TrainConfig | None = None) -> tuple[dict, dict[str, np.ndarray]]:
    extra = {
        "step": state.step,
        "optimizer": {"lr": state.lr, "betas": list(state.betas), "eps": state.eps, "weight_decay": state.weight_decay},
    }
    if cfg is not None:
        extra["train_config"] = cfg.to_dict()
    tensors = {f"opt.m/{k}": v for k, v in state.m.items()}
    tensors.update({f"opt.v/{k}": v for k, v in state.v.items()})
    return extra, tensors


def restore_state(extra: dict, tensors: dict[str, np.ndarray]) -> OptimizerState:
    opt = extra.get("optimizer", {})
    m = {k[len("opt.m/") :]: v for k, v in tensors.items() if k.startswith("opt.m/")}
    v = {k[len("opt.v/") :]: a for k, a in tensors.items() if k.startswith("opt.v/")}
    return OptimizerState(
        lr=opt.get("lr", 5e-5),
        betas=tuple(opt.get("betas", (0.9, 0.999))),
        eps=opt.get("eps", 1e-8),
        weight_decay=opt.get("weight_decay", 0.0),
        m=m,
        v=v,
        step=int(extra.get("step", 0)),
    )
