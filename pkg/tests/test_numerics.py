import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from gradcheck import check_gradients
from locore.errors import DegenerateError, NonFiniteGradientError, ShapeError
from locore.numerics import (
    GELU_CUBIC,
    GELU_SQRT_2_OVER_PI,
    OptimizerState,
    Tape,
    Var,
    adamw_step,
    bce_with_logits,
    dropout,
    gelu,
    layer_norm,
    linear,
    softmax_rows,
    take_rows,
)

finite = st.floats(-50, 50, allow_nan=False, width=64)


def rand_var(rng, shape, grad=True, name=None):
    return Var(rng.standard_normal(shape), requires_grad=grad, name=name)


# ---------------------------------------------------------------- linear


def test_linear_identity_weight():
    out = linear(Var(np.array([[1.0, 2.0]])), Var(np.eye(2)), Var(np.zeros(2)))
    np.testing.assert_array_equal(out.value, [[1.0, 2.0]])


def test_linear_zero_input_passes_bias():
    rng = np.random.default_rng(0)
    out = linear(Var(np.zeros((1, 2))), Var(rng.standard_normal((2, 2))), Var(np.array([3.0, 4.0])))
    np.testing.assert_array_equal(out.value, [[3.0, 4.0]])


def test_linear_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(4, 3\).*\(2, 5\)"):
        linear(Var(np.zeros((4, 3))), Var(np.zeros((2, 5))))


@pytest.mark.parametrize("seed", range(5))
def test_linear_gradients(seed):
    rng = np.random.default_rng(seed)
    x, w, b = rand_var(rng, (4, 3), name="x"), rand_var(rng, (3, 5), name="w"), rand_var(rng, (5,), name="b")
    errs = check_gradients(lambda: linear(x, w, b), [x, w, b], seed)
    assert max(errs.values()) <= 1e-3, errs


# ---------------------------------------------------------------- softmax


def test_softmax_symmetric_pair():
    np.testing.assert_allclose(softmax_rows(Var(np.zeros((1, 2)))).value, [[0.5, 0.5]])


def test_softmax_large_logit_is_stable():
    p = softmax_rows(Var(np.array([[1000.0, 0.0]]))).value
    assert np.all(np.isfinite(p))
    np.testing.assert_allclose(p, [[1.0, 0.0]], atol=1e-6)


def test_softmax_matches_float64_direct_formula():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((6, 9)).astype(np.float32)
    direct = np.exp(x.astype(np.float64)) / np.exp(x.astype(np.float64)).sum(axis=1, keepdims=True)
    np.testing.assert_allclose(softmax_rows(Var(x)).value, direct, atol=1e-6)


def test_softmax_fully_masked_row_raises():
    mask = np.array([[0.0, 0.0], [-np.inf, -np.inf]])
    with pytest.raises(DegenerateError):
        softmax_rows(Var(np.zeros((2, 2))), mask)


def test_softmax_mask_zeroes_entries():
    mask = np.array([[0.0, -np.inf, 0.0]])
    p = softmax_rows(Var(np.array([[1.0, 5.0, 1.0]])), mask).value
    np.testing.assert_allclose(p, [[0.5, 0.0, 0.5]])


@settings(max_examples=60, deadline=None)
@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=2, max_dims=2, max_side=8), elements=finite), st.data())
def test_softmax_rows_sum_to_one(x, data):
    mask = data.draw(hnp.arrays(bool, x.shape))
    mask[:, 0] = True  # at least one unmasked entry per row
    additive = np.where(mask, 0.0, -np.inf)
    p = softmax_rows(Var(x), additive).value
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-6)


@pytest.mark.parametrize("seed", range(5))
def test_softmax_gradients(seed):
    rng = np.random.default_rng(seed)
    x = rand_var(rng, (3, 5), name="x")
    mask = np.where(rng.random((3, 5)) < 0.3, -np.inf, 0.0)
    mask[:, 0] = 0.0
    errs = check_gradients(lambda: softmax_rows(x, mask), [x], seed)
    assert errs["x"] <= 1e-3


# ---------------------------------------------------------------- layer norm


def test_layer_norm_constant_row_is_zero():
    out = layer_norm(Var(np.full((1, 4), 3.0)), Var(np.ones(4)), Var(np.zeros(4)))
    np.testing.assert_array_equal(out.value, np.zeros((1, 4)))


def test_layer_norm_already_normalized_row():
    out = layer_norm(Var(np.array([[1.0, -1.0]])), Var(np.ones(2)), Var(np.zeros(2)), eps=1e-12)
    np.testing.assert_allclose(out.value, [[1.0, -1.0]], atol=1e-9)


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(2, 8)), elements=st.floats(-10, 10, width=64)))
def test_layer_norm_rows_standardized(x):
    x = x + np.arange(x.shape[1])  # guarantee nonzero variance
    out = layer_norm(Var(x), Var(np.ones(x.shape[1])), Var(np.zeros(x.shape[1])), eps=0.0).value
    np.testing.assert_allclose(out.mean(axis=1), 0.0, atol=1e-9)
    np.testing.assert_allclose(out.var(axis=1), 1.0, atol=1e-6)


@pytest.mark.parametrize("seed", range(5))
def test_layer_norm_gradients(seed):
    rng = np.random.default_rng(seed)
    x, g, b = rand_var(rng, (3, 6), name="x"), rand_var(rng, (6,), name="g"), rand_var(rng, (6,), name="b")
    errs = check_gradients(lambda: layer_norm(x, g, b), [x, g, b], seed)
    assert max(errs.values()) <= 1e-3, errs


# ---------------------------------------------------------------- gelu


def test_gelu_zero_and_asymptote():
    assert gelu(Var(np.zeros((1, 1)))).value[0, 0] == 0.0
    assert abs(gelu(Var(np.array([[10.0]]))).value[0, 0] - 10.0) <= 1e-4


def test_gelu_constants_documented_values():
    assert GELU_SQRT_2_OVER_PI == pytest.approx(math.sqrt(2 / math.pi))
    assert GELU_CUBIC == 0.044715


def test_gelu_close_to_exact_erf_form():
    x = np.linspace(-4, 4, 81)[None, :]
    exact = 0.5 * x * (1 + np.vectorize(math.erf)(x / math.sqrt(2)))
    np.testing.assert_allclose(gelu(Var(x)).value, exact, atol=1e-3)


@pytest.mark.parametrize("seed", range(5))
def test_gelu_gradients(seed):
    rng = np.random.default_rng(seed)
    x = Var(3 * rng.standard_normal((4, 4)), requires_grad=True, name="x")
    assert check_gradients(lambda: gelu(x), [x], seed)["x"] <= 1e-3


# ---------------------------------------------------------------- bce


def test_bce_logit_zero_is_ln2():
    loss = bce_with_logits(Var(np.array([0.0])), np.array([1]))
    assert float(loss.value) == pytest.approx(math.log(2), abs=1e-12)


def test_bce_saturation_is_finite():
    loss = float(bce_with_logits(Var(np.array([20.0])), np.array([1])).value)
    assert np.isfinite(loss)
    assert loss == pytest.approx(2.06e-9, rel=1e-2)


def test_bce_matches_float64_direct_evaluation():
    rng = np.random.default_rng(3)
    z = rng.standard_normal(50) * 4
    y = rng.integers(0, 2, 50)
    m = rng.integers(0, 2, 50)
    m[0] = 1
    s = 1 / (1 + np.exp(-z))
    direct = -(y * np.log(s) + (1 - y) * np.log(1 - s))
    expected = (direct * m).sum() / m.sum()
    assert float(bce_with_logits(Var(z), y, m).value) == pytest.approx(expected, abs=1e-6)


def test_bce_all_masked_raises():
    with pytest.raises(DegenerateError):
        bce_with_logits(Var(np.zeros(3)), np.ones(3), np.zeros(3))


@settings(max_examples=80, deadline=None)
@given(hnp.arrays(np.float64, st.integers(1, 20), elements=finite), st.data())
def test_bce_nonnegative(z, data):
    y = data.draw(hnp.arrays(np.int8, z.shape, elements=st.integers(0, 1)))
    assert float(bce_with_logits(Var(z), y).value) >= 0.0


def test_bce_zero_only_in_saturation_limit():
    assert float(bce_with_logits(Var(np.array([5.0])), np.array([1])).value) > 0
    assert float(bce_with_logits(Var(np.array([800.0])), np.array([1])).value) == 0.0


@pytest.mark.parametrize("seed", range(5))
def test_bce_gradients(seed):
    rng = np.random.default_rng(seed)
    z = Var(rng.standard_normal((7, 1)) * 3, requires_grad=True, name="z")
    y, m = rng.integers(0, 2, 7), np.r_[1, rng.integers(0, 2, 6)]
    assert check_gradients(lambda: bce_with_logits(z, y, m), [z], seed)["z"] <= 1e-3


# ---------------------------------------------------------------- gather / dropout / tape


def test_take_rows_gradient_accumulates_repeats():
    rng = np.random.default_rng(0)
    table = rand_var(rng, (4, 3), name="t")
    idx = np.array([0, 2, 2, 3, 0])
    assert check_gradients(lambda: take_rows(table, idx), [table])["t"] <= 1e-3


def test_dropout_inactive_without_rng_or_rate():
    x = Var(np.ones((2, 2)))
    assert dropout(x, 0.5, None) is x
    assert dropout(x, 0.0, np.random.default_rng(0)) is x


def test_dropout_preserves_expectation():
    x = Var(np.ones((200, 200)))
    out = dropout(x, 0.25, np.random.default_rng(0)).value
    assert set(np.unique(out)) <= {0.0, 1 / 0.75}
    assert out.mean() == pytest.approx(1.0, abs=0.02)


def test_tape_visits_each_op_once_in_reverse():
    rng = np.random.default_rng(0)
    x, w = rand_var(rng, (2, 3)), rand_var(rng, (3, 3))
    g, b = Var(np.ones(3), True), Var(np.zeros(3), True)
    with Tape() as tape:
        h = linear(x, w)
        h = gelu(h)
        h = layer_norm(h, g, b)
        loss = bce_with_logits(linear(h, Var(np.ones((3, 1)), True)), np.ones(2))
        tape.backward(loss)
    names = [r.name for r in tape.records]
    assert tape.visited == names[::-1]
    assert len(tape.visited) == len(set(id(r) for r in tape.records))


def test_no_tape_means_no_recording():
    x = Var(np.ones((1, 2)), requires_grad=True)
    out = linear(x, Var(np.eye(2), True))
    with Tape() as tape:
        pass
    assert tape.records == []
    assert out.value.shape == (1, 2)


# ---------------------------------------------------------------- adamw


def reference_adamw(p, grads, lr, b1, b2, eps, wd):
    m = np.zeros_like(p)
    v = np.zeros_like(p)
    for t, g in enumerate(grads, 1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1**t)
        vhat = v / (1 - b2**t)
        p = p - lr * wd * p - lr * mhat / (np.sqrt(vhat) + eps)
    return p


def test_adamw_zero_gradient_leaves_params():
    p = {"w": np.array([1.0, -2.0])}
    new, state = adamw_step(p, {"w": np.zeros(2)}, OptimizerState(lr=0.1))
    np.testing.assert_array_equal(new["w"], p["w"])
    assert state.step == 1


def test_adamw_first_step_moves_by_lr():
    new, _ = adamw_step({"w": np.array([0.0])}, {"w": np.array([1.0])}, OptimizerState(lr=0.1))
    assert new["w"][0] == pytest.approx(-0.1, rel=1e-6)


@pytest.mark.parametrize("wd", [0.0, 0.01])
def test_adamw_three_step_trajectory(wd):
    rng = np.random.default_rng(0)
    p0 = rng.standard_normal((3, 2))
    grads = [rng.standard_normal((3, 2)) for _ in range(3)]
    state = OptimizerState(lr=0.01, weight_decay=wd)
    params = {"p": p0.copy()}
    for g in grads:
        params, state = adamw_step(params, {"p": g}, state)
    expected = reference_adamw(p0, grads, 0.01, 0.9, 0.999, 1e-8, wd)
    np.testing.assert_allclose(params["p"], expected, atol=1e-7)
    assert state.step == 3


def test_adamw_is_functional():
    p = {"w": np.array([1.0])}
    state = OptimizerState(lr=0.1)
    adamw_step(p, {"w": np.array([1.0])}, state)
    assert p["w"][0] == 1.0 and state.step == 0 and state.m == {}


def test_adamw_rejects_non_finite_gradient():
    state = OptimizerState(lr=0.1)
    p = {"a": np.array([1.0]), "b": np.array([2.0])}
    with pytest.raises(NonFiniteGradientError, match="'b'"):
        adamw_step(p, {"a": np.array([1.0]), "b": np.array([np.nan])}, state)
    assert p["a"][0] == 1.0 and state.step == 0


@pytest.mark.parametrize("bad", [dict(lr=0.0), dict(eps=-1.0), dict(betas=(1.0, 0.9)), dict(weight_decay=-0.1)])
def test_optimizer_state_validation(bad):
    with pytest.raises(ValueError):
        OptimizerState(**bad)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(0, 2**31 - 1))
def test_adamw_layout_invariance(r, c, seed):
    rng = np.random.default_rng(seed)
    p = rng.standard_normal((r, c))
    gs = [rng.standard_normal((r, c)) for _ in range(3)]
    s1, s2 = OptimizerState(lr=0.01), OptimizerState(lr=0.01)
    a, b = {"p": p}, {"p": p.reshape(-1)}
    for g in gs:
        a, s1 = adamw_step(a, {"p": g}, s1)
        b, s2 = adamw_step(b, {"p": g.reshape(-1)}, s2)
    np.testing.assert_array_equal(a["p"].reshape(-1), b["p"])
