"""Pre-norm transformer over the sparse pattern, with a per-token binary head."""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

from .attention import AttentionLayerParams, AttentionPattern, build_pattern, sparse_attention
from .errors import CheckpointFormatError, ShapeError
from .numerics import Var, dropout, gelu, layer_norm, linear
from .sequence import PositionalTables, TokenMeta, TokenSequence, assemble
from .store import LocalDescriptorSet, _atomic_write

# Local attention window per variant; the radius is half of it.
_VARIANTS = {
    "tiny": dict(layers=4, hidden=512, intermediate=2048, heads=8, window=1024),
    "small": dict(layers=6, hidden=768, intermediate=3072, heads=12, window=512),
    "base": dict(layers=12, hidden=768, intermediate=3072, heads=12, window=512),
    # desk-scale stand-in for tiny, trainable on one CPU in minutes
    "toy": dict(layers=2, hidden=64, intermediate=256, heads=4, window=16),
}


@dataclass(frozen=True)
class ModelConfig:
    layers: int
    hidden: int
    intermediate: int
    heads: int
    window_radius: int
    max_context: int
    L: int
    K: int
    d: int | None = None  # descriptor dim; None means d == hidden
    dropout_rate: float = 0.1
    seed: int = 0
    global_attention: bool = True
    tie_global_projections: bool = False
    use_projection: bool | None = None  # None: project only when d != hidden
    layer_norm_eps: float = 1e-5
    # "normal": every weight truncated-normal(0, 0.02).  "symmetric": attention
    # weights use std 1/sqrt(hidden) and each key projection starts equal to its
    # query projection, so attention favours similar tokens from the first step.
    attention_init: str = "symmetric"
    # None: 0.8 / sqrt(hidden), a slot tag about as long as a unit descriptor
    image_position_std: float | None = None

    def __post_init__(self):
        if self.hidden % self.heads:
            raise ValueError(f"hidden size {self.hidden} is not divisible by {self.heads} heads")
        if self.max_context < (self.L + 1) * (self.K + 1):
            raise ValueError(
                f"max_context {self.max_context} is below (L+1)(K+1) = {(self.L + 1) * (self.K + 1)}"
            )
        if self.window_radius < 1:
            raise ValueError("window_radius must be >= 1")
        for name in ("layers", "intermediate", "L", "K"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")
        if self.attention_init not in ("normal", "symmetric"):
            raise ValueError(f"attention_init must be 'normal' or 'symmetric', got {self.attention_init!r}")
        if self.image_position_std is not None and self.image_position_std < 0:
            raise ValueError("image_position_std must be >= 0")

    @property
    def M(self) -> int:
        return (self.L + 1) * (self.K + 1)

    @property
    def descriptor_dim(self) -> int:
        return self.hidden if self.d is None else self.d

    @property
    def projected(self) -> bool:
        if self.use_projection is None:
            return self.descriptor_dim != self.hidden
        if not self.use_projection and self.descriptor_dim != self.hidden:
            raise ValueError("projection disabled but descriptor dim differs from hidden size")
        return self.use_projection

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown ModelConfig field(s): {', '.join(sorted(unknown))}")
        return cls(**doc)


def make_config(variant: str = "base", L: int = 50, K: int = 100, **overrides) -> ModelConfig:
    try:
        v = dict(_VARIANTS[variant])
    except KeyError:
        raise ValueError(f"unknown variant {variant!r}; choose from {sorted(_VARIANTS)}") from None
    window = v.pop("window")
    cfg = dict(v, window_radius=window // 2, max_context=(L + 1) * (K + 1), L=L, K=K)
    cfg.update(overrides)
    return ModelConfig(**cfg)


def _trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) resampled outside two standard deviations."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


@dataclass
class Block:
    ln1_gain: Var
    ln1_shift: Var
    attn: AttentionLayerParams
    ln2_gain: Var
    ln2_shift: Var
    w1: Var
    b1: Var
    w2: Var
    b2: Var


class RerankerModel:
    """Parameters plus configuration.  ``params`` maps stable names to Vars."""

    def __init__(self, config: ModelConfig, params: dict[str, Var]):
        self.config = config
        self.params = params
        self._build_views()

    def _build_views(self) -> None:
        p, c = self.params, self.config
        self.projection = p.get("proj.weight")
        self.tables = PositionalTables(p["pos.sequence"], p["pos.image"])
        self.sep = p["sep"]
        self.blocks: list[Block] = []
        for i in range(c.layers):
            pre = f"blocks.{i}."
            a = pre + "attn."
            if c.tie_global_projections:
                attn = AttentionLayerParams.tied(
                    c.heads, *(p[a + n] for n in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo"))
                )
            else:
                attn = AttentionLayerParams(
                    c.heads,
                    *(p[a + n] for n in ("wq", "bq", "wk", "bk", "wv", "bv", "wqg", "bqg", "wkg", "bkg", "wvg", "bvg", "wo", "bo")),
                )
            self.blocks.append(
                Block(
                    p[pre + "ln1.gain"], p[pre + "ln1.shift"], attn, p[pre + "ln2.gain"], p[pre + "ln2.shift"],
                    p[pre + "ffn.w1"], p[pre + "ffn.b1"], p[pre + "ffn.w2"], p[pre + "ffn.b2"],
                )
            )
        self.lnf_gain, self.lnf_shift = p["ln_f.gain"], p["ln_f.shift"]
        self.cls_w, self.cls_b = p["classifier.weight"], p["classifier.bias"]

    @property
    def dtype(self):
        return self.sep.dtype

    def zero_grad(self) -> None:
        for v in self.params.values():
            v.grad = None

    def grads(self) -> dict[str, np.ndarray]:
        return {k: (v.grad if v.grad is not None else np.zeros_like(v.value)) for k, v in self.params.items()}

    def values(self) -> dict[str, np.ndarray]:
        return {k: v.value for k, v in self.params.items()}

    def load_values(self, values: dict[str, np.ndarray]) -> None:
        for k, v in values.items():
            if self.params[k].shape != v.shape:
                raise ShapeError(f"parameter {k!r}: shape {v.shape} vs {self.params[k].shape}")
            self.params[k].value = v

    def astype(self, dtype) -> "RerankerModel":
        params = {k: Var(v.value.astype(dtype), requires_grad=True, name=k) for k, v in self.params.items()}
        return RerankerModel(self.config, params)

    def copy(self) -> "RerankerModel":
        return self.astype(self.dtype)


def _param_shapes(cfg: ModelConfig) -> dict[str, tuple[tuple[int, ...], str]]:
    """name -> (shape, init kind) with kind in {normal, zeros, ones}."""
    h, f = cfg.hidden, cfg.intermediate
    shapes: dict[str, tuple[tuple[int, ...], str]] = {}
    if cfg.projected:
        shapes["proj.weight"] = ((cfg.descriptor_dim, h), "normal")
    shapes["pos.sequence"] = ((cfg.max_context, h), "normal")
    shapes["pos.image"] = ((cfg.K + 1, h), "normal")
    shapes["sep"] = ((h,), "normal")
    attn_names = ["q", "k", "v"] if cfg.tie_global_projections else ["q", "k", "v", "qg", "kg", "vg"]
    for i in range(cfg.layers):
        pre = f"blocks.{i}."
        shapes[pre + "ln1.gain"] = ((h,), "ones")
        shapes[pre + "ln1.shift"] = ((h,), "zeros")
        for n in [*attn_names, "o"]:
            shapes[pre + f"attn.w{n}"] = ((h, h), "normal")
            shapes[pre + f"attn.b{n}"] = ((h,), "zeros")
        shapes[pre + "ln2.gain"] = ((h,), "ones")
        shapes[pre + "ln2.shift"] = ((h,), "zeros")
        shapes[pre + "ffn.w1"] = ((h, f), "normal")
        shapes[pre + "ffn.b1"] = ((f,), "zeros")
        shapes[pre + "ffn.w2"] = ((f, h), "normal")
        shapes[pre + "ffn.b2"] = ((h,), "zeros")
    shapes["ln_f.gain"] = ((h,), "ones")
    shapes["ln_f.shift"] = ((h,), "zeros")
    shapes["classifier.weight"] = ((h, 1), "normal")
    shapes["classifier.bias"] = ((1,), "zeros")
    return shapes


def _init_std(cfg: ModelConfig, name: str) -> float:
    if name == "pos.image":
        return 0.8 / np.sqrt(cfg.hidden) if cfg.image_position_std is None else cfg.image_position_std
    if cfg.attention_init == "symmetric" and ".attn.w" in name:
        return 1.0 / np.sqrt(cfg.hidden)
    return 0.02


def init_model(cfg: ModelConfig, dtype=np.float32) -> RerankerModel:
    """Truncated-normal weights, zero biases, unit layer-norm gains.

    Standard deviations follow ``cfg.attention_init`` and
    ``cfg.image_position_std``; everything else uses 0.02.
    """
    rng = np.random.default_rng(cfg.seed)
    params = {}
    for name, (shape, kind) in _param_shapes(cfg).items():
        if kind == "normal":
            val = _trunc_normal(rng, shape, _init_std(cfg, name))
        elif kind == "ones":
            val = np.ones(shape)
        else:
            val = np.zeros(shape)
        params[name] = Var(val.astype(dtype), requires_grad=True, name=name)
    if cfg.attention_init == "symmetric":
        for name in params:
            if name.endswith((".attn.wk", ".attn.wkg")):
                params[name].value = params[name.replace(".attn.wk", ".attn.wq")].value.copy()
    return RerankerModel(cfg, params)


def param_count(model_or_cfg) -> int:
    cfg = model_or_cfg.config if isinstance(model_or_cfg, RerankerModel) else model_or_cfg
    return int(sum(np.prod(shape) for shape, _ in _param_shapes(cfg).values()))


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------


@dataclass
class TokenLogits:
    logits: np.ndarray  # (M,)
    meta: TokenMeta
    node: Var | None = None  # (M, 1) graph node, for training


def assemble_for(model: RerankerModel, query: LocalDescriptorSet, gallery: list[LocalDescriptorSet]) -> TokenSequence:
    cfg = model.config
    if len(gallery) != cfg.K:
        raise ShapeError(f"model expects K={cfg.K} gallery images, got {len(gallery)}")
    if query.L != cfg.L:
        raise ShapeError(f"model expects L={cfg.L} descriptors per image, got {query.L}")
    if query.d != cfg.descriptor_dim:
        raise ShapeError(f"model expects descriptor dim {cfg.descriptor_dim}, got {query.d}")
    return assemble(query, gallery, model.projection, model.tables, model.sep)


def pattern_for(model: RerankerModel, meta: TokenMeta) -> AttentionPattern:
    return build_pattern(meta, model.config.window_radius, use_global=model.config.global_attention)


def forward(
    model: RerankerModel,
    seq: TokenSequence,
    pattern: AttentionPattern | None = None,
    mode: str = "eval",
    rng: np.random.Generator | None = None,
) -> TokenLogits:
    """Per-token logits.  ``mode='train'`` enables dropout (needs ``rng``)."""
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    cfg = model.config
    if pattern is None:
        pattern = pattern_for(model, seq.meta)
    if pattern.M != seq.M:
        raise ShapeError(f"pattern covers {pattern.M} tokens, sequence has {seq.M}")
    if seq.embeddings.shape[1] != cfg.hidden:
        raise ShapeError(f"embeddings have width {seq.embeddings.shape[1]}, model hidden is {cfg.hidden}")
    rate = cfg.dropout_rate if mode == "train" else 0.0
    drng = rng if mode == "train" else None
    eps = cfg.layer_norm_eps
    h = seq.embeddings
    for b in model.blocks:
        a = layer_norm(h, b.ln1_gain, b.ln1_shift, eps)
        a = sparse_attention(a, b.attn, pattern, rate, drng)
        h = h + dropout(a, rate, drng)
        f = layer_norm(h, b.ln2_gain, b.ln2_shift, eps)
        f = linear(gelu(linear(f, b.w1, b.b1)), b.w2, b.b2)
        h = h + dropout(f, rate, drng)
    h = layer_norm(h, model.lnf_gain, model.lnf_shift, eps)
    out = linear(h, model.cls_w, model.cls_b)
    return TokenLogits(out.value.reshape(-1).copy(), seq.meta, out)


# ---------------------------------------------------------------------------
# checkpoint I/O
# ---------------------------------------------------------------------------

CKPT_MAGIC = b"LCRM"
CKPT_VERSION = 1


def encode_checkpoint(model: RerankerModel, extra: dict | None = None, tensors: dict[str, np.ndarray] | None = None) -> bytes:
    """``LCRM | version u32 | json_len u32 | json | n u32 | tensors``.

    Each tensor: name_len u16, name, rank u32, dims u32*rank, f32 payload.
    ``tensors`` adds non-parameter arrays (optimizer moments).
    """
    blob = json.dumps({"config": model.config.to_dict(), "extra": extra or {}}, sort_keys=True).encode()
    items = [(k, v.value) for k, v in model.params.items()]
    items += list((tensors or {}).items())
    parts = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(blob)), blob, struct.pack("<I", len(items))]
    for name, arr in items:
        raw = name.encode()
        arr = np.asarray(arr)
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.astype("<f4").tobytes())
    return b"".join(parts)


def decode_checkpoint(buf: bytes) -> tuple[RerankerModel, dict, dict[str, np.ndarray]]:
    if buf[:4] != CKPT_MAGIC:
        raise CheckpointFormatError(f"bad checkpoint magic {buf[:4]!r}")
    pos = 4

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointFormatError("truncated checkpoint")
        out = buf[pos : pos + n]
        pos += n
        return out

    version, blen = struct.unpack("<II", take(8))
    if version != CKPT_VERSION:
        raise CheckpointFormatError(f"checkpoint version {version}, reader supports {CKPT_VERSION}")
    meta = json.loads(take(blen))
    cfg = ModelConfig.from_dict(meta["config"])
    (n,) = struct.unpack("<I", take(4))
    arrays = {}
    for _ in range(n):
        (ln,) = struct.unpack("<H", take(2))
        name = take(ln).decode()
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        count = int(np.prod(dims)) if rank else 1
        arrays[name] = np.frombuffer(take(4 * count), "<f4").reshape(dims).astype(np.float32)
    if pos != len(buf):
        raise CheckpointFormatError("trailing bytes in checkpoint")
    shapes = _param_shapes(cfg)
    missing = set(shapes) - set(arrays)
    if missing:
        raise CheckpointFormatError(f"checkpoint lacks parameters: {sorted(missing)[:5]}")
    params = {}
    for name, (shape, _) in shapes.items():
        if arrays[name].shape != shape:
            raise CheckpointFormatError(f"parameter {name!r} has shape {arrays[name].shape}, expected {shape}")
        params[name] = Var(arrays.pop(name), requires_grad=True, name=name)
    return RerankerModel(cfg, params), meta.get("extra", {}), arrays


def save_checkpoint(model: RerankerModel, path, extra: dict | None = None, tensors=None) -> None:
    _atomic_write(Path(path), encode_checkpoint(model, extra, tensors))


def load_checkpoint(path) -> tuple[RerankerModel, dict, dict[str, np.ndarray]]:
    return decode_checkpoint(Path(path).read_bytes())


def with_overrides(cfg: ModelConfig, **kw) -> ModelConfig:
    return replace(cfg, **kw)
