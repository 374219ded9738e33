"""Banded attention with symmetric global tokens.

Ordinary tokens attend to a window of ``window_radius`` tokens on either side
plus every global token, using the local Q/K/V projections.  Global tokens
(query-image tokens and SEPs) attend to every non-padding token with their own
Q/K/V projections.  Padding tokens neither attend nor are attended to and
produce zero output.

:func:`sparse_attention` is a single tape op with a hand-written backward.
It gathers keys for each ordinary row into a (rows, allowed) table and runs
the global rows densely against all columns, so the largest score buffer is
``M * (2 * radius + 1 + |global|)``; no M x M array is built.
:func:`dense_reference_attention` is the small-scale oracle.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from .errors import DegenerateError, ShapeError
from .numerics import Var, record
from .sequence import Role, TokenMeta

ORACLE_CEILING = 512


@dataclass(frozen=True, eq=False)
class AttentionPattern:
    M: int
    window_radius: int
    global_indices: np.ndarray
    padding_indices: np.ndarray

    def __post_init__(self):
        if self.window_radius < 1:
            raise ValueError(f"window_radius must be >= 1, got {self.window_radius}")
        g = np.unique(np.asarray(self.global_indices, dtype=np.intp))
        p = np.unique(np.asarray(self.padding_indices, dtype=np.intp))
        if g.size and (g[0] < 0 or g[-1] >= self.M):
            raise ValueError("global indices out of range")
        if p.size and (p[0] < 0 or p[-1] >= self.M):
            raise ValueError("padding indices out of range")
        object.__setattr__(self, "global_indices", np.setdiff1d(g, p))
        object.__setattr__(self, "padding_indices", p)

    @classmethod
    def banded(cls, M: int, window_radius: int, global_indices=(), padding_indices=()) -> "AttentionPattern":
        return cls(M, window_radius, np.asarray(global_indices, np.intp), np.asarray(padding_indices, np.intp))

    @cached_property
    def is_padding(self) -> np.ndarray:
        m = np.zeros(self.M, bool)
        m[self.padding_indices] = True
        return m

    @cached_property
    def is_global(self) -> np.ndarray:
        m = np.zeros(self.M, bool)
        m[self.global_indices] = True
        return m

    @cached_property
    def nonpad(self) -> np.ndarray:
        return np.flatnonzero(~self.is_padding)

    @cached_property
    def local_rows(self) -> np.ndarray:
        return np.flatnonzero(~self.is_padding & ~self.is_global)

    @cached_property
    def _gather(self) -> tuple[np.ndarray, np.ndarray, sp.csr_matrix]:
        """(idx, valid, scatter) for ordinary rows.

        ``idx[r, a]`` is the a-th key candidate of row ``local_rows[r]``;
        band entries that are global or padding are invalid (globals are
        appended once at the end).  ``scatter`` maps flattened gathered
        entries back onto token rows.
        """
        rows = self.local_rows
        r = min(self.window_radius, self.M - 1)
        offsets = np.arange(-r, r + 1)
        band = rows[:, None] + offsets[None, :]
        inside = (band >= 0) & (band < self.M)
        clipped = np.clip(band, 0, self.M - 1)
        band_ok = inside & ~self.is_padding[clipped] & ~self.is_global[clipped]
        G = self.global_indices
        idx = np.concatenate([clipped, np.broadcast_to(G, (len(rows), len(G)))], axis=1)
        valid = np.concatenate([band_ok, np.ones((len(rows), len(G)), bool)], axis=1)
        flat = np.flatnonzero(valid.ravel())
        scatter = sp.csr_matrix(
            (np.ones(len(flat)), (idx.ravel()[flat], flat)), shape=(self.M, idx.size)
        )
        return np.ascontiguousarray(idx), valid, scatter

    def allowed(self, i: int) -> np.ndarray:
        """Sorted token indices that token ``i`` attends to."""
        if self.is_padding[i]:
            return np.zeros(0, np.intp)
        if self.is_global[i]:
            return self.nonpad
        lo, hi = max(0, i - self.window_radius), min(self.M, i + self.window_radius + 1)
        band = np.arange(lo, hi)
        band = band[~self.is_padding[band]]
        return np.union1d(band, self.global_indices)

    def attends(self, i: int, j: int) -> bool:
        if self.is_padding[i] or self.is_padding[j]:
            return False
        return bool(self.is_global[i] or self.is_global[j] or abs(i - j) <= self.window_radius)

    def dense_mask(self, ceiling: int = ORACLE_CEILING) -> np.ndarray:
        """Full M x M boolean mask; for the oracle only."""
        if self.M > ceiling:
            raise ValueError(f"dense mask refused: M={self.M} exceeds oracle ceiling {ceiling}")
        i = np.arange(self.M)
        m = np.abs(i[:, None] - i[None, :]) <= self.window_radius
        m |= self.is_global[:, None] | self.is_global[None, :]
        m &= ~self.is_padding[:, None] & ~self.is_padding[None, :]
        return m


def build_pattern(meta: TokenMeta, window_radius: int, use_global: bool = True) -> AttentionPattern:
    """Globals are all non-padding QUERY and SEP tokens (none if ``use_global`` is off)."""
    if window_radius < 1:
        raise ValueError(f"window_radius must be >= 1, got {window_radius}")
    M = len(meta)
    if use_global:
        glob = np.flatnonzero(((meta.role == Role.QUERY) | (meta.role == Role.SEP)) & ~meta.is_padding)
    else:
        glob = np.zeros(0, np.intp)
    return AttentionPattern(M, window_radius, glob, np.flatnonzero(meta.is_padding))


@dataclass
class AttentionLayerParams:
    heads: int
    wq: Var
    bq: Var
    wk: Var
    bk: Var
    wv: Var
    bv: Var
    wqg: Var
    bqg: Var
    wkg: Var
    bkg: Var
    wvg: Var
    bvg: Var
    wo: Var
    bo: Var

    def __post_init__(self):
        h = self.wq.shape[0]
        if h % self.heads:
            raise ShapeError(f"hidden size {h} is not divisible by {self.heads} heads")

    @property
    def hidden(self) -> int:
        return self.wq.shape[0]

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads

    def vars(self) -> list[Var]:
        return [getattr(self, f.name) for f in fields(self) if f.name != "heads"]

    @classmethod
    def tied(cls, heads, wq, bq, wk, bk, wv, bv, wo, bo) -> "AttentionLayerParams":
        """Global projections share the local ones."""
        return cls(heads, wq, bq, wk, bk, wv, bv, wq, bq, wk, bk, wv, bv, wo, bo)


_PARAM_ORDER = ("wq", "bq", "wk", "bk", "wv", "bv", "wqg", "bqg", "wkg", "bkg", "wvg", "bvg", "wo", "bo")


def _masked_softmax(s: np.ndarray, valid: np.ndarray) -> np.ndarray:
    s = np.where(valid, s, -np.inf)
    mx = s.max(axis=-1, keepdims=True)
    e = np.exp(s - mx)
    return e / e.sum(axis=-1, keepdims=True)


def sparse_attention(
    x: Var,
    params: AttentionLayerParams,
    pattern: AttentionPattern,
    dropout_rate: float = 0.0,
    rng: np.random.Generator | None = None,
) -> Var:
    xv = x.value
    M, h = xv.shape
    if M != pattern.M:
        raise ShapeError(f"pattern is for M={pattern.M} tokens, input has {M}")
    if h != params.hidden:
        raise ShapeError(f"input hidden size {h} does not match projections {params.hidden}")
    H, dh = params.heads, params.head_dim
    scale = 1.0 / np.sqrt(dh)
    P = {n: getattr(params, n).value for n in _PARAM_ORDER}
    dtype = xv.dtype
    drop = dropout_rate > 0.0 and rng is not None

    R = pattern.local_rows
    G = pattern.global_indices
    N = pattern.nonpad
    ctx = np.zeros((M, H, dh), dtype)

    # ordinary rows: gathered band + globals
    idx, valid, scatter = pattern._gather
    xR = xv[R]
    Q = (xR @ P["wq"] + P["bq"]).reshape(len(R), H, dh)
    K = (xv @ P["wk"] + P["bk"]).reshape(M, H, dh)
    V = (xv @ P["wv"] + P["bv"]).reshape(M, H, dh)
    # head-major gathers (r, H, A, dh) so the products below are batched matmuls
    Kg_ = K[idx].transpose(0, 2, 1, 3)
    Vg_ = V[idx].transpose(0, 2, 1, 3)
    s = (Q[:, :, None, :] @ Kg_.swapaxes(-1, -2))[:, :, 0, :] * scale
    vmask = valid[:, None, :]
    if len(R) and np.any(~vmask.any(axis=-1)):
        raise DegenerateError("a non-padding token has an empty attention set")
    A = _masked_softmax(s, vmask).astype(dtype, copy=False)
    keep = None
    if drop:
        keep = ((rng.random(A.shape) >= dropout_rate) / (1.0 - dropout_rate)).astype(dtype)
        Ad = A * keep
    else:
        Ad = A
    ctx[R] = (Ad[:, :, None, :] @ Vg_)[:, :, 0, :]

    # global rows: dense over all non-padding tokens
    if len(G):
        xG = xv[G]
        Qg = (xG @ P["wqg"] + P["bqg"]).reshape(len(G), H, dh)
        Kgl = (xv @ P["wkg"] + P["bkg"]).reshape(M, H, dh)
        Vgl = (xv @ P["wvg"] + P["bvg"]).reshape(M, H, dh)
        KN, VN = Kgl[N].transpose(1, 0, 2), Vgl[N].transpose(1, 0, 2)  # (H, n, dh)
        sg = (Qg.transpose(1, 0, 2) @ KN.swapaxes(-1, -2)) * scale
        Ag = _masked_softmax(sg, np.ones((1, 1, len(N)), bool)).astype(dtype, copy=False)
        keep_g = None
        if drop:
            keep_g = ((rng.random(Ag.shape) >= dropout_rate) / (1.0 - dropout_rate)).astype(dtype)
            Agd = Ag * keep_g
        else:
            Agd = Ag
        ctx[G] = (Agd @ VN).transpose(1, 0, 2)

    ctx2 = ctx.reshape(M, h)
    out = ctx2 @ P["wo"] + P["bo"]
    out[pattern.padding_indices] = 0

    def backward(gout):
        gout = gout.copy()
        gout[pattern.padding_indices] = 0
        grads = dict.fromkeys(_PARAM_ORDER)
        grads["wo"] = ctx2.T @ gout
        grads["bo"] = gout.sum(axis=0)
        dctx = (gout @ P["wo"].T).reshape(M, H, dh)
        dx = np.zeros_like(xv)

        dcR = dctx[R]
        dAd = (dcR[:, :, None, :] @ Vg_.swapaxes(-1, -2))[:, :, 0, :]
        dVg = Ad[..., None] * dcR[:, :, None, :]
        dA = dAd * keep if keep is not None else dAd
        ds = A * (dA - (A * dA).sum(axis=-1, keepdims=True)) * scale
        dQ = (ds[:, :, None, :] @ Kg_)[:, :, 0, :].reshape(len(R), h)
        dKg = ds[..., None] * Q[:, :, None, :]
        flat = idx.size
        dK = np.asarray(scatter @ dKg.transpose(0, 2, 1, 3).reshape(flat, h), dtype=dtype)
        dV = np.asarray(scatter @ dVg.transpose(0, 2, 1, 3).reshape(flat, h), dtype=dtype)
        grads["wq"] = xR.T @ dQ
        grads["bq"] = dQ.sum(axis=0)
        grads["wk"] = xv.T @ dK
        grads["bk"] = dK.sum(axis=0)
        grads["wv"] = xv.T @ dV
        grads["bv"] = dV.sum(axis=0)
        dx[R] += dQ @ P["wq"].T
        dx += dK @ P["wk"].T + dV @ P["wv"].T

        if len(G):
            dcG = dctx[G]
            dcGh = dcG.transpose(1, 0, 2)
            dAgd = dcGh @ VN.swapaxes(-1, -2)
            dVN = (Agd.swapaxes(-1, -2) @ dcGh).transpose(1, 0, 2)
            dAg = dAgd * keep_g if keep_g is not None else dAgd
            dsg = Ag * (dAg - (Ag * dAg).sum(axis=-1, keepdims=True)) * scale
            dQg = (dsg @ KN).transpose(1, 0, 2).reshape(len(G), h)
            dKN = (dsg.swapaxes(-1, -2) @ Qg.transpose(1, 0, 2)).transpose(1, 0, 2).reshape(len(N), h)
            dKgl = np.zeros((M, h), dtype)
            dVgl = np.zeros((M, h), dtype)
            dKgl[N] = dKN
            dVgl[N] = dVN.reshape(len(N), h)
            grads["wqg"] = xG.T @ dQg
            grads["bqg"] = dQg.sum(axis=0)
            grads["wkg"] = xv.T @ dKgl
            grads["bkg"] = dKgl.sum(axis=0)
            grads["wvg"] = xv.T @ dVgl
            grads["bvg"] = dVgl.sum(axis=0)
            dx[G] += dQg @ P["wqg"].T
            dx += dKgl @ P["wkg"].T + dVgl @ P["wvg"].T
        else:
            for n in ("wqg", "bqg", "wkg", "bkg", "wvg", "bvg"):
                grads[n] = np.zeros_like(P[n])
        return (dx, *(grads[n] for n in _PARAM_ORDER))

    inputs = (x, *(getattr(params, n) for n in _PARAM_ORDER))
    return record("sparse_attention", out, inputs, backward)


def dense_reference_attention(
    x,
    params: AttentionLayerParams,
    mask: np.ndarray,
    global_indices=(),
    padding_indices=(),
    ceiling: int = ORACLE_CEILING,
) -> np.ndarray:
    """Textbook masked multi-head attention over an explicit M x M mask.

    Rows listed in ``global_indices`` use the global projections for their
    query and for every key/value they read; other rows use the local ones.
    Rows in ``padding_indices`` output zeros.
    """
    xv = x.value if isinstance(x, Var) else np.asarray(x)
    M, h = xv.shape
    if M > ceiling:
        raise ValueError(f"dense oracle refused: M={M} exceeds ceiling {ceiling}")
    mask = np.asarray(mask, bool)
    if mask.shape != (M, M):
        raise ShapeError(f"mask must be {M}x{M}, got {mask.shape}")
    H, dh = params.heads, params.head_dim
    p = {n: getattr(params, n).value.astype(xv.dtype) for n in _PARAM_ORDER}
    is_glob = np.zeros(M, bool)
    is_glob[np.asarray(global_indices, np.intp)] = True
    is_pad = np.zeros(M, bool)
    is_pad[np.asarray(padding_indices, np.intp)] = True

    def heads(t):
        return t.reshape(M, H, dh).transpose(1, 0, 2)

    Ql, Kl, Vl = (heads(xv @ p[f"w{c}"] + p[f"b{c}"]) for c in "qkv")
    Qg, Kg, Vg = (heads(xv @ p[f"w{c}g"] + p[f"b{c}g"]) for c in "qkv")
    out = np.zeros((H, M, dh), xv.dtype)
    for i in range(M):
        if is_pad[i]:
            continue
        cols = np.flatnonzero(mask[i])
        if cols.size == 0:
            raise DegenerateError(f"token {i} has an empty attention set")
        Q, K, V = (Qg, Kg, Vg) if is_glob[i] else (Ql, Kl, Vl)
        s = np.einsum("hd,hnd->hn", Q[:, i], K[:, cols]) / np.sqrt(dh)
        s = s - s.max(axis=1, keepdims=True)
        w = np.exp(s)
        w /= w.sum(axis=1, keepdims=True)
        out[:, i] = np.einsum("hn,hnd->hd", w, V[:, cols])
    res = out.transpose(1, 0, 2).reshape(M, h) @ p["wo"] + p["bo"]
    res[is_pad] = 0
    return res


# ---------------------------------------------------------------------------
# operation counts
# ---------------------------------------------------------------------------

# per (query, key) pair per head: score dot 2*dh + scale 1 + softmax 4
# (max, subtract, exp, normalize) + weighted value sum 2*dh
def _pair_cost(dh: int) -> int:
    return 4 * dh + 5


def flop_breakdown(pattern: AttentionPattern, h: int, heads: int) -> dict[str, int]:
    """Arithmetic operations of :func:`sparse_attention` under ``pattern``, by part.

    ``projections`` covers every affine map (Q, K, V for both projection sets
    and the output); ``pairs`` covers per-pair score, softmax and value work.
    Padding rows and columns cost nothing beyond their K/V projection.
    """
    if pattern.window_radius < 1:
        raise ValueError("window_radius must be >= 1")
    if h % heads:
        raise ValueError(f"hidden size {h} is not divisible by {heads} heads")
    dh = h // heads
    M = pattern.M
    proj = 2 * h * h + h  # one row through one h x h affine map
    n_glob = len(pattern.global_indices)
    _, valid, _ = pattern._gather
    local_pairs = int(valid.sum())
    global_pairs = n_glob * len(pattern.nonpad)
    projections = len(pattern.local_rows) * proj + 2 * M * proj + M * proj
    if n_glob:
        projections += n_glob * proj + 2 * M * proj
    return {"projections": projections, "pairs": heads * _pair_cost(dh) * (local_pairs + global_pairs)}


def flop_count(pattern: AttentionPattern, h: int, heads: int) -> int:
    """Total of :func:`flop_breakdown`."""
    return int(sum(flop_breakdown(pattern, h, heads).values()))


def dense_flop_breakdown(M: int, h: int, heads: int) -> dict[str, int]:
    """Standard full self-attention on M tokens, counted the same way."""
    dh = h // heads
    proj = 2 * h * h + h
    return {"projections": 4 * M * proj, "pairs": heads * _pair_cost(dh) * M * M}


def dense_flop_count(M: int, h: int, heads: int) -> int:
    return int(sum(dense_flop_breakdown(M, h, heads).values()))
