"""Differentiable primitives over 2-D float arrays and the AdamW optimizer.

Values are plain ``numpy`` arrays wrapped in :class:`Var`.  Operations run
eagerly; when a :class:`Tape` is active they also record a backward closure,
and :meth:`Tape.backward` replays those closures in reverse.  Without an
active tape every op is a plain forward computation, which is what inference
uses.

Ops keep the dtype of their inputs: float32 for training and inference,
float64 when running finite-difference checks.
"""

from __future__ import annotations

import contextvars
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import DegenerateError, NonFiniteGradientError, ShapeError

_ACTIVE_TAPE: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar(
    "locore_active_tape", default=None
)

# tanh approximation of GELU: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))
GELU_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)
GELU_CUBIC = 0.044715


class Var:
    """A value node.  Parameters are ``Var(..., requires_grad=True)``."""

    __slots__ = ("value", "grad", "requires_grad", "name")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.value = np.asarray(value)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def zero_grad(self) -> None:
        self.grad = None

    def __add__(self, other: "Var") -> "Var":
        return add(self, other)

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Var{label}(shape={self.shape}, dtype={self.dtype})"


def as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


@dataclass
class _Record:
    name: str
    output: Var
    inputs: tuple[Var, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Records ops executed inside ``with tape:`` for one reverse sweep.

    Leaf variables (those not produced on this tape) that have
    ``requires_grad`` accumulate into ``.grad``; repeated backward passes over
    different tapes therefore sum, which is how gradient accumulation works.
    """

    def __init__(self) -> None:
        self.records: list[_Record] = []
        self.visited: list[str] = []
        self._produced: set[int] = set()
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPE.reset(self._token)
        self._token = None

    def _record(self, name, output, inputs, backward) -> None:
        self.records.append(_Record(name, output, tuple(inputs), backward))
        self._produced.add(id(output))

    def backward(self, output: Var, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if output.value.size != 1:
                raise ShapeError(f"backward seed required for non-scalar output of shape {output.shape}")
            grad = np.ones_like(output.value)
        grads: dict[int, np.ndarray] = {id(output): np.asarray(grad, dtype=output.dtype)}
        self.visited = []
        for rec in reversed(self.records):
            g = grads.pop(id(rec.output), None)
            self.visited.append(rec.name)
            if g is None:
                continue
            for inp, gi in zip(rec.inputs, rec.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                if id(inp) in self._produced:
                    prev = grads.get(id(inp))
                    grads[id(inp)] = gi if prev is None else prev + gi
                else:
                    inp.grad = gi.copy() if inp.grad is None else inp.grad + gi


def active_tape() -> Tape | None:
    return _ACTIVE_TAPE.get()


def record(name: str, out_value: np.ndarray, inputs: Sequence[Var], backward) -> Var:
    """Wrap ``out_value`` as a Var and register ``backward`` on the active tape.

    ``backward(grad_out)`` must return one gradient (or None) per input.
    """
    needs = any(v.requires_grad for v in inputs)
    out = Var(out_value, requires_grad=needs)
    tape = _ACTIVE_TAPE.get()
    if tape is not None and needs:
        tape._record(name, out, inputs, backward)
    return out


def _check_2d(x: np.ndarray, what: str) -> None:
    if x.ndim != 2:
        raise ShapeError(f"{what} must be 2-D, got shape {x.shape}")


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def linear(x: Var, weight: Var, bias: Var | None = None) -> Var:
    """``x @ weight + bias``."""
    xv, wv = x.value, weight.value
    _check_2d(xv, "x")
    _check_2d(wv, "weight")
    if xv.shape[1] != wv.shape[0]:
        raise ShapeError(f"linear: x has shape {xv.shape} but weight has shape {wv.shape}")
    out = xv @ wv
    if bias is not None:
        if bias.shape != (wv.shape[1],):
            raise ShapeError(f"linear: bias shape {bias.shape} does not match weight {wv.shape}")
        out = out + bias.value

    def backward(g):
        gx = g @ wv.T if x.requires_grad else None
        gw = xv.T @ g if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return record("linear", out, inputs, backward)


def add(a: Var, b: Var) -> Var:
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")
    return record("add", a.value + b.value, (a, b), lambda g: (g, g))


def take_rows(table: Var, index: np.ndarray) -> Var:
    """Row gather ``table[index]``; backward scatters with accumulation."""
    index = np.asarray(index, dtype=np.intp)
    tv = table.value

    def backward(g):
        gt = np.zeros_like(tv)
        np.add.at(gt, index, g)
        return (gt,)

    return record("take_rows", tv[index], (table,), backward)


def masked_rows(vector: Var, mask: np.ndarray) -> Var:
    """Rows equal to ``vector`` where ``mask`` is set, zero elsewhere."""
    mask = np.asarray(mask, dtype=bool)
    vv = vector.value
    out = np.where(mask[:, None], vv[None, :], np.zeros((), dtype=vv.dtype))
    return record("masked_rows", out.astype(vv.dtype), (vector,), lambda g: (g[mask].sum(axis=0),))


def softmax_rows(x: Var, mask: np.ndarray | None = None) -> Var:
    """Row softmax with an optional additive mask of 0 / -inf entries."""
    xv = x.value
    _check_2d(xv, "x")
    z = xv if mask is None else xv + np.asarray(mask, dtype=xv.dtype)
    if mask is not None and np.any(np.all(np.isneginf(z), axis=1)):
        bad = int(np.flatnonzero(np.all(np.isneginf(z), axis=1))[0])
        raise DegenerateError(f"softmax_rows: row {bad} is fully masked")
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return record("softmax_rows", p, (x,), backward)


def layer_norm(x: Var, gain: Var, shift: Var, eps: float = 1e-5) -> Var:
    xv = x.value
    _check_2d(xv, "x")
    n = xv.shape[1]
    if gain.shape != (n,) or shift.shape != (n,):
        raise ShapeError(f"layer_norm: gain {gain.shape}/shift {shift.shape} vs x {xv.shape}")
    mu = xv.mean(axis=1, keepdims=True)
    xc = xv - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.value + shift.value

    def backward(g):
        gxhat = g * gain.value
        gx = inv * (
            gxhat
            - gxhat.mean(axis=1, keepdims=True)
            - xhat * (gxhat * xhat).mean(axis=1, keepdims=True)
        )
        return gx, (g * xhat).sum(axis=0), g.sum(axis=0)

    return record("layer_norm", out, (x, gain, shift), backward)


def gelu(x: Var) -> Var:
    xv = x.value
    c, k = GELU_SQRT_2_OVER_PI, GELU_CUBIC
    t = np.tanh(c * (xv + k * xv**3))
    out = 0.5 * xv * (1.0 + t)

    def backward(g):
        dt = (1.0 - t * t) * c * (1.0 + 3.0 * k * xv * xv)
        return (g * (0.5 * (1.0 + t) + 0.5 * xv * dt),)

    return record("gelu", out.astype(xv.dtype, copy=False), (x,), backward)


def dropout(x: Var, rate: float, rng: np.random.Generator | None) -> Var:
    if rate <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return record("dropout", x.value * keep, (x,), lambda g: (g * keep,))


def bce_with_logits(logits: Var, labels: np.ndarray, mask: np.ndarray | None = None) -> Var:
    """Mean binary cross-entropy over unmasked entries (mask 1 = counted).

    Uses ``max(z, 0) - z*y + log1p(exp(-|z|))``, which never overflows.
    Accepts logits of shape (n,) or (n, 1).
    """
    zv = logits.value
    z = zv.reshape(-1)
    y = np.asarray(labels, dtype=zv.dtype).reshape(-1)
    m = np.ones_like(z) if mask is None else np.asarray(mask, dtype=zv.dtype).reshape(-1)
    if not (z.shape == y.shape == m.shape):
        raise ShapeError(f"bce_with_logits: logits {zv.shape}, labels {y.shape}, mask {m.shape}")
    count = float(m.sum())
    if count == 0:
        raise DegenerateError("bce_with_logits: every entry is masked")
    per = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
    loss = np.asarray((per * m).sum() / count, dtype=zv.dtype)

    def backward(g):
        sig = sigmoid(z)
        return ((g * (sig - y) * m / count).reshape(zv.shape).astype(zv.dtype),)

    return record("bce_with_logits", loss, (logits,), backward)


def sigmoid(z):
    z = np.asarray(z)
    ez = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + ez), ez / (1.0 + ez))


# ---------------------------------------------------------------------------
# AdamW
# ---------------------------------------------------------------------------


@dataclass
class OptimizerState:
    lr: float = 5e-5
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    def __post_init__(self):
        if self.lr <= 0 or self.eps <= 0 or self.weight_decay < 0:
            raise ValueError("AdamW hyperparameters must be positive (weight decay nonnegative)")
        b1, b2 = self.betas
        if not (0 <= b1 < 1 and 0 <= b2 < 1):
            raise ValueError(f"betas must lie in [0, 1), got {self.betas}")


def adamw_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: OptimizerState,
) -> tuple[dict[str, np.ndarray], OptimizerState]:
    """One bias-corrected AdamW update with decoupled weight decay.

    Returns new parameter arrays and a new state; inputs are not modified.
    Raises NonFiniteGradientError (leaving everything untouched) if any
    gradient contains NaN or inf.
    """
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise ShapeError(f"gradient {name!r} has shape {g.shape}, parameter {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"non-finite gradient for {name!r}; update rejected")

    b1, b2 = state.betas
    t = state.step + 1
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    new_params, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads.get(name)
        m = state.m.get(name)
        v = state.v.get(name)
        if g is None:
            g = np.zeros_like(p)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + state.eps)
        q = p
        if state.weight_decay:
            q = q - state.lr * state.weight_decay * q
        new_params[name] = (q - state.lr * update).astype(p.dtype, copy=False)
        new_m[name] = m.astype(p.dtype, copy=False)
        new_v[name] = v.astype(p.dtype, copy=False)
    new_state = OptimizerState(
        lr=state.lr, betas=state.betas, eps=state.eps, weight_decay=state.weight_decay,
        m=new_m, v=new_v, step=t,
    )
    return new_params, new_state
