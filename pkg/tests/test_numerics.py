from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from xdrlvlm.numerics import (
    AdamW,
    DimensionError,
    OptimizerState,
    Tensor,
    WeightFileError,
    adamw_step,
    backward,
    bce_with_logits,
    check_gradients,
    clip_grads,
    concat,
    cosine_lr,
    cross_entropy,
    decode_weights,
    embedding,
    encode_weights,
    exp,
    gelu,
    global_grad_norm,
    layer_norm,
    log,
    log_softmax,
    matmul,
    no_grad,
    relu,
    sigmoid,
    softmax,
    sqrt,
    tanh,
    trace,
)

finite = st.floats(-5, 5, allow_nan=False, allow_infinity=False)


def P(x):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)


# -- matmul ----------------------------------------------------------------
def test_matmul_oracles():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    b = Tensor([[5.0, 6.0], [7.0, 8.0]])
    np.testing.assert_array_equal(matmul(a, b).data, [[19, 22], [43, 50]])
    np.testing.assert_array_equal(matmul(Tensor(np.eye(2)), b).data, b.data)
    np.testing.assert_array_equal(matmul(Tensor(np.zeros((2, 2))), Tensor(np.ones((2, 3)))).data, np.zeros((2, 3)))


def test_matmul_shape_mismatch_names_dims():
    with pytest.raises(DimensionError):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_batched_matmul_matches_numpy():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(3, 4, 5)), rng.normal(size=(5, 2))
    np.testing.assert_allclose(matmul(Tensor(a), Tensor(b)).data, a @ b, atol=1e-12)


# -- softmax / layer norm / cross entropy -----------------------------------
def test_softmax_oracles():
    np.testing.assert_allclose(softmax(Tensor([0.0, math.log(3.0)])).data, [0.25, 0.75], atol=1e-15)
    np.testing.assert_allclose(softmax(Tensor([7.0] * 4)).data, [0.25] * 4, atol=1e-15)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 6), elements=st.floats(-1e3, 1e3)))
def test_softmax_rows_are_distributions(x):
    s = softmax(Tensor(x), axis=-1).data
    assert np.isfinite(s).all()
    np.testing.assert_allclose(s.sum(axis=-1), 1.0, atol=1e-12)
    assert (s >= 0).all()


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (2, 5), elements=finite), st.floats(-50, 50))
def test_softmax_shift_invariance(x, c):
    np.testing.assert_allclose(softmax(Tensor(x)).data, softmax(Tensor(x + c)).data, atol=1e-12)


def test_masked_softmax_zeroes_masked_entries():
    mask = np.array([[True, False, True]])
    s = softmax(Tensor(np.zeros((1, 3))), mask=mask).data
    np.testing.assert_allclose(s, [[0.5, 0.0, 0.5]])


def test_layer_norm_oracles():
    one, zero = Tensor(np.ones(2)), Tensor(np.zeros(2))
    np.testing.assert_allclose(layer_norm(Tensor([[3.0, 3.0]]), one, zero).data, 0.0)
    np.testing.assert_allclose(layer_norm(Tensor([[-1.0, 1.0]]), one, zero).data, [[-1.0, 1.0]], atol=1e-4)
    bias = Tensor([0.5, -2.0])
    np.testing.assert_allclose(layer_norm(Tensor([[4.0, 9.0]]), zero, bias).data, [[0.5, -2.0]])


def test_cross_entropy_oracles():
    assert cross_entropy(Tensor(np.zeros((3, 8))), [1, 2, 3]).item() == pytest.approx(math.log(8), abs=1e-12)
    sharp = np.zeros((1, 5))
    sharp[0, 2] = 1e3
    assert cross_entropy(Tensor(sharp), [2]).item() == pytest.approx(0.0, abs=1e-12)
    assert cross_entropy(Tensor([[0.0, math.log(3.0)]]), [0]).item() == pytest.approx(math.log(4), abs=1e-12)


def test_cross_entropy_mask_ignores_positions():
    logits = np.random.default_rng(1).normal(size=(4, 6))
    full = cross_entropy(Tensor(logits[:2]), [0, 1]).item()
    masked = cross_entropy(Tensor(logits), [0, 1, 5, 5], mask=[1, 1, 0, 0]).item()
    assert masked == pytest.approx(full, abs=1e-14)
    with pytest.raises(ValueError, match="masked"):
        cross_entropy(Tensor(logits), [0, 1, 2, 3], mask=[0, 0, 0, 0])


def test_cross_entropy_rejects_out_of_range_target():
    with pytest.raises(ValueError, match="out of range"):
        cross_entropy(Tensor(np.zeros((1, 3))), [3])


def test_non_finite_output_raises():
    with pytest.raises(FloatingPointError):
        log(Tensor([0.0]))


# -- backward --------------------------------------------------------------
def test_backward_trivial_oracles():
    x = P([1.0, -2.0, 3.0])
    backward(x.sum())
    np.testing.assert_array_equal(x.grad, np.ones(3))
    y = P([1.0, -2.0, 3.0])
    backward((y * y).sum())
    np.testing.assert_array_equal(y.grad, 2 * y.data)


def test_backward_accumulates_and_leaves_frozen_alone():
    x, w = P([2.0]), Tensor([5.0])
    backward((x * w).sum())
    backward((x * w).sum())
    assert x.grad[0] == 10.0 and w.grad is None


def test_backward_requires_scalar():
    with pytest.raises(DimensionError):
        backward(P([1.0, 2.0]) * 2.0)


def test_trace_is_topological():
    x = P([1.0])
    y = exp(x) * x + x
    g = trace(y)
    pos = g.index_of()
    for a, b in g.edges():
        assert a < b
    assert pos[id(x)] == 0


def test_no_grad_is_per_thread():
    # interleave: A enters, B enters, A exits, B exits.  With one shared flag the
    # last restore would leave gradients off for everyone.
    import threading

    from xdrlvlm.numerics.tensor import grad_enabled

    steps = [threading.Event() for _ in range(3)]
    seen = {}

    def a():
        with no_grad():
            steps[0].set()
            steps[1].wait()
        seen["a_after"] = grad_enabled()
        steps[2].set()

    def b():
        steps[0].wait()
        with no_grad():
            seen["b_inside"] = grad_enabled()
            steps[1].set()
            steps[2].wait()
        seen["b_after"] = grad_enabled()

    ts = [threading.Thread(target=f) for f in (a, b)]
    for t in ts:
        t.start()
    for t in ts:
        t.join(5)
    assert seen == {"a_after": True, "b_inside": False, "b_after": True}
    assert grad_enabled() and (P([1.0, 2.0]) * 2.0).sum().requires_grad


def test_no_grad_records_nothing():
    x = P([1.0, 2.0])
    with no_grad():
        y = (x * x).sum()
    assert not y.requires_grad and y._parents == ()
    assert (x * x).sum().requires_grad


UNARY = {"exp": exp, "tanh": tanh, "relu": relu, "gelu": gelu, "sigmoid": sigmoid,
         "log": lambda t: log(t * t + 1.0), "sqrt": lambda t: sqrt(t * t + 0.5),
         "softmax": lambda t: softmax(t, axis=-1), "log_softmax": lambda t: log_softmax(t, axis=-1)}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_ops_pass_gradcheck(name):
    rng = np.random.default_rng(2)
    x = P(rng.normal(size=(4, 9)) + 0.05)  # offset keeps relu away from its kink
    w = rng.normal(size=(4, 9))
    res = check_gradients(lambda: (UNARY[name](x) * w).sum(), {"x": x})
    assert all(r.ok for r in res), res


def test_composite_ops_pass_gradcheck():
    rng = np.random.default_rng(3)
    a, b = P(rng.normal(size=(2, 3, 4))), P(rng.normal(size=(4, 5)))
    g, bias = P(rng.normal(size=5)), P(rng.normal(size=5))
    table = P(rng.normal(size=(7, 5)))
    logits_w = P(rng.normal(size=(5, 6)))

    def loss():
        h = layer_norm(matmul(a, b), g, bias)
        h = concat([h, embedding(table, np.array([[1, 2, 3], [3, 0, 6]]))], axis=1)
        h = h.transpose(0, 2, 1).transpose(0, 2, 1) / 2.0 - 0.1
        lg = matmul(h, logits_w)
        return cross_entropy(lg, np.arange(12).reshape(2, 6) % 6, mask=np.arange(12).reshape(2, 6) % 3 > 0) + \
            bce_with_logits(lg[:, 0, :], np.eye(2, 6)) + (h[:, 1:3] * h[:, 1:3]).mean()

    res = check_gradients(loss, {"a": a, "b": b, "g": g, "bias": bias, "table": table, "w": logits_w})
    assert all(r.ok for r in res), res


# -- optimiser -------------------------------------------------------------
def test_cosine_lr_oracles():
    assert cosine_lr(0, 100, 1.0, 0.1) == 1.0
    assert cosine_lr(100, 100, 1.0, 0.1) == pytest.approx(0.1)
    assert cosine_lr(50, 100, 1.0, 0.1) == pytest.approx(0.55)
    with pytest.raises(ValueError):
        cosine_lr(101, 100, 1.0)
    with pytest.raises(ValueError):
        cosine_lr(0, 10, 0.1, 0.2)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 500), st.floats(1e-4, 1.0), st.floats(0, 1.0))
def test_cosine_lr_monotone_and_bounded(total, lr_max, frac):
    lr_min = lr_max * frac
    lrs = [cosine_lr(s, total, lr_max, lr_min) for s in range(total + 1)]
    assert all(lr_min - 1e-12 <= x <= lr_max + 1e-12 for x in lrs)
    assert all(a >= b - 1e-12 for a, b in zip(lrs, lrs[1:]))


def test_adamw_zero_grad_no_decay_is_identity():
    w = P([1.0, -2.0])
    st_ = OptimizerState(total_steps=5, lr_max=0.1, weight_decay=0.0)
    adamw_step({"w": w}, {"w": np.zeros(2)}, st_)
    np.testing.assert_array_equal(w.data, [1.0, -2.0])


def test_adamw_first_step_moves_against_gradient_sign():
    w = P([0.0, 0.0, 0.0])
    adamw_step({"w": w}, {"w": np.array([3.0, -0.5, 1e-3])}, OptimizerState(10, lr_max=0.01, weight_decay=0.0))
    np.testing.assert_array_equal(np.sign(w.data), [-1, 1, -1])


def test_adamw_converges_on_quadratic_bowl():
    w = P([1.5, -0.7, 0.3])
    opt = AdamW({"w": w}, total_steps=200, lr=0.1, weight_decay=0.0, clip_norm=None)
    for _ in range(200):
        opt.zero_grad()
        backward((w * w).sum())
        opt.step()
    assert np.linalg.norm(w.data) < 1e-3


def test_adamw_rejects_non_finite_gradient_without_side_effects():
    w = P([1.0])
    st_ = OptimizerState(5, lr_max=0.1)
    with pytest.raises(FloatingPointError):
        adamw_step({"w": w}, {"w": np.array([np.nan])}, st_)
    assert w.data[0] == 1.0 and st_.step == 0 and not st_.m


def test_clip_grads_bounds_global_norm():
    grads = {"a": np.array([3.0, 0.0]), "b": np.array([[4.0]])}
    assert clip_grads(grads, 1.0) == pytest.approx(5.0)
    assert global_grad_norm(grads) == pytest.approx(1.0)


# -- weight file -----------------------------------------------------------
@settings(max_examples=30, deadline=None)
@given(st.dictionaries(st.text(min_size=1, max_size=8).filter(lambda s: s != "__meta__"),
                       arrays(np.float64, st.tuples(st.integers(0, 3), st.integers(1, 4)),
                              elements=st.floats(allow_nan=False)), max_size=4))
def test_weight_roundtrip_is_bit_exact(tensors):
    back, meta = decode_weights(encode_weights(tensors, {"k": 1}))
    assert meta == {"k": 1}
    assert list(back) == list(tensors)
    for k in tensors:
        assert back[k].tobytes() == np.asarray(tensors[k]).tobytes()


def test_weight_file_corruption_detected():
    buf = encode_weights({"w": np.ones((2, 2))})
    with pytest.raises(WeightFileError):
        decode_weights(b"NOPE" + buf[4:])
    with pytest.raises(WeightFileError):
        decode_weights(buf[:-3])
