"""Unit and property tests for the reverse-mode core.

Oracles used here:
* triple-loop matmul written out longhand,
* mpmath at 50 decimal digits for softmax / log-sum-exp values,
* closed-form single-step Adam arithmetic,
* central finite differences (with a deliberately corrupted backward rule as
  the negative control).
"""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ttrmil.diffcore import (
    Adam,
    AdamState,
    GradTape,
    Tensor2,
    adam_step,
    add,
    concat_rows,
    cross_entropy,
    dropout,
    grad_check,
    linear,
    log_sum_exp,
    mul_ew,
    scale,
    select_rows,
    sigmoid_ew,
    softmax_subset,
    tanh_ew,
    weighted_sum,
    zero_grads,
)
from ttrmil.errors import DimensionMismatch, NonFiniteError


def test_tensor2_rejects_non_2d() -> None:
    with pytest.raises(DimensionMismatch):
        Tensor2(np.zeros(3))
    with pytest.raises(DimensionMismatch):
        Tensor2(np.zeros((2, 2, 2)))


def test_tensor2_rejects_non_finite() -> None:
    with pytest.raises(NonFiniteError):
        Tensor2([[1.0, np.nan]])
    with pytest.raises(NonFiniteError):
        Tensor2([[np.inf], [0.0]])


def test_tensor2_shape_accessors() -> None:
    t = Tensor2(np.zeros((3, 5)))
    assert t.rows == 3 and t.cols == 5 and t.shape == (3, 5)


def test_linear_scalar_case() -> None:
    out = linear(Tensor2([[3.0]]), Tensor2([[5.0]]))
    assert out.data[0, 0] == 15.0


def test_linear_matches_triple_loop_oracle() -> None:
    rng = np.random.default_rng(7)
    x = rng.normal(size=(3, 4))
    w = rng.normal(size=(4, 2))
    b = rng.normal(size=(1, 2))
    expected = np.zeros((3, 2))
    for i in range(3):
        for j in range(2):
            acc = b[0, j]
            for k in range(4):
                acc += x[i, k] * w[k, j]
            expected[i, j] = acc
    out = linear(Tensor2(x), Tensor2(w), Tensor2(b))
    np.testing.assert_allclose(out.data, expected, rtol=1e-12)


def test_linear_shape_mismatch_raises() -> None:
    with pytest.raises(DimensionMismatch):
        linear(Tensor2(np.zeros((2, 3))), Tensor2(np.zeros((4, 2))))
    with pytest.raises(DimensionMismatch):
        linear(Tensor2(np.zeros((2, 3))), Tensor2(np.zeros((3, 2))), Tensor2(np.zeros((1, 3))))


def test_tanh_endpoints() -> None:
    assert tanh_ew(Tensor2([[0.0]])).data[0, 0] == 0.0
    big = tanh_ew(Tensor2([[50.0]])).data[0, 0]
    assert 1.0 - 1e-9 < big <= 1.0


def test_tanh_gradient_matches_central_difference() -> None:
    x = Tensor2([[0.5]])
    tape = GradTape()
    out = tanh_ew(x, tape)
    tape.backward(out)
    eps = 1e-6
    fd = (math.tanh(0.5 + eps) - math.tanh(0.5 - eps)) / (2 * eps)
    assert abs(x.grad[0, 0] - fd) < 1e-7


def test_sigmoid_is_overflow_free_and_symmetric() -> None:
    out = sigmoid_ew(Tensor2([[-800.0, 0.0, 800.0]]))
    assert out.data[0, 0] == 0.0
    assert out.data[0, 1] == 0.5
    assert out.data[0, 2] == 1.0


def test_softmax_subset_uniform_on_equal_scores() -> None:
    scores = Tensor2(np.zeros((6, 1)))
    out = softmax_subset(scores, [0, 2, 4, 5])
    np.testing.assert_array_equal(out.data[:, 0], np.full(4, 0.25))


def test_softmax_subset_max_shift_avoids_overflow() -> None:
    out = softmax_subset(Tensor2([[1000.0], [0.0]]), [0, 1])
    assert np.isfinite(out.data).all()
    assert out.data[0, 0] == pytest.approx(1.0)
    assert out.data[1, 0] == pytest.approx(0.0, abs=1e-300)


def test_softmax_subset_matches_mpmath_oracle() -> None:
    mp = pytest.importorskip("mpmath")
    mp.mp.dps = 50
    vals = [0.1, 0.2, 0.3]
    exps = [mp.e ** v for v in vals]
    total = sum(exps)
    expected = [float(e / total) for e in exps]
    out = softmax_subset(Tensor2(np.array(vals)[:, None]), [0, 1, 2])
    np.testing.assert_allclose(out.data[:, 0], expected, rtol=1e-14)


def test_softmax_subset_rejects_bad_subsets() -> None:
    scores = Tensor2(np.zeros((3, 1)))
    with pytest.raises(ValueError):
        softmax_subset(scores, [])
    with pytest.raises(ValueError):
        softmax_subset(scores, [1, 1])
    with pytest.raises(IndexError):
        softmax_subset(scores, [3])


@given(st.lists(st.floats(min_value=-50, max_value=50), min_size=1, max_size=30))
@settings(max_examples=60, deadline=None)
def test_softmax_subset_is_a_distribution(vals) -> None:
    out = softmax_subset(Tensor2(np.array(vals, dtype=float)[:, None]), np.arange(len(vals)))
    assert (out.data >= 0).all()
    assert abs(out.data.sum() - 1.0) <= 1e-12


def test_dropout_identity_paths_return_same_node() -> None:
    x = Tensor2(np.ones((4, 4)))
    assert dropout(x, 0.0, training=True, rng=np.random.default_rng(0)) is x
    assert dropout(x, 0.5, training=False) is x


def test_dropout_rejects_bad_rate() -> None:
    x = Tensor2(np.ones((2, 2)))
    with pytest.raises(ValueError):
        dropout(x, 1.0, training=True, rng=np.random.default_rng(0))
    with pytest.raises(ValueError):
        dropout(x, -0.1, training=True, rng=np.random.default_rng(0))


def test_dropout_preserves_mean_within_three_sigma() -> None:
    n = 100_000
    rate = 0.25
    x = Tensor2(np.ones((n, 1)))
    out = dropout(x, rate, rng=np.random.default_rng(123), training=True)
    # each entry is 0 w.p. rate or 1/(1-rate): var = rate/(1-rate) = 1/3
    sigma_mean = math.sqrt((rate / (1 - rate)) / n)
    assert abs(out.data.mean() - 1.0) < 3 * sigma_mean


def test_dropout_masks_are_seed_deterministic() -> None:
    x = Tensor2(np.ones((50, 3)))
    a = dropout(x, 0.5, rng=np.random.default_rng(9), training=True)
    b = dropout(x, 0.5, rng=np.random.default_rng(9), training=True)
    np.testing.assert_array_equal(a.data, b.data)


def test_weighted_sum_matches_loop_oracle() -> None:
    rng = np.random.default_rng(3)
    a = rng.random((5, 1))
    x = rng.normal(size=(5, 4))
    expected = np.zeros(4)
    for i in range(5):
        expected += a[i, 0] * x[i]
    out = weighted_sum(Tensor2(a), Tensor2(x))
    np.testing.assert_allclose(out.data[0], expected, rtol=1e-12)


def test_log_sum_exp_max_shift() -> None:
    out = log_sum_exp(Tensor2([[1000.0], [1000.0]]))
    assert out.data[0, 0] == pytest.approx(1000.0 + math.log(2.0), rel=1e-15)


def test_log_sum_exp_matches_mpmath_oracle() -> None:
    mp = pytest.importorskip("mpmath")
    mp.mp.dps = 50
    vals = [-1.5, 0.25, 2.0, 0.0]
    expected = float(mp.log(sum(mp.e ** v for v in vals)))
    out = log_sum_exp(Tensor2(np.array(vals)[:, None]))
    assert out.data[0, 0] == pytest.approx(expected, rel=1e-14)


def test_cross_entropy_uniform_logits_is_log_num_classes() -> None:
    out = cross_entropy(Tensor2(np.zeros((1, 2))), [1])
    assert out.data[0, 0] == pytest.approx(math.log(2.0), rel=1e-15)


def test_cross_entropy_saturated_is_near_zero() -> None:
    out = cross_entropy(Tensor2([[30.0, -30.0]]), [0])
    assert out.data[0, 0] < 1e-12


def test_cross_entropy_averages_rows() -> None:
    logits = Tensor2([[2.0, 0.0], [0.0, 1.0]])
    z0 = math.log(math.exp(2.0) + 1.0) - 2.0
    z1 = math.log(1.0 + math.exp(1.0)) - 1.0
    out = cross_entropy(logits, [0, 1])
    assert out.data[0, 0] == pytest.approx((z0 + z1) / 2.0, rel=1e-14)


def test_adam_pure_decay_shrinks_by_exact_factor() -> None:
    p = Tensor2([[1.0]])
    state = AdamState.for_params([p])
    lr, wd = 1e-4, 1e-5
    adam_step([p], [np.zeros((1, 1))], state, lr, wd, t=1)
    assert p.data[0, 0] == 1.0 * (1.0 - lr * wd)
    # decay stays out of the moment buffers
    assert state.m[0][0, 0] == 0.0 and state.v[0][0, 0] == 0.0


def test_adam_single_step_closed_form() -> None:
    p = Tensor2([[1.0]])
    state = AdamState.for_params([p])
    lr = 1e-4
    adam_step([p], [np.ones((1, 1))], state, lr, 0.0, t=1)
    # bias correction makes m_hat = v_hat = 1 on the first step
    expected = 1.0 - lr * 1.0 / (1.0 + 1e-8)
    assert p.data[0, 0] == pytest.approx(expected, rel=1e-15)


def test_adam_rejects_bad_step_index_and_shapes() -> None:
    p = Tensor2([[1.0]])
    state = AdamState.for_params([p])
    with pytest.raises(ValueError):
        adam_step([p], [np.zeros((1, 1))], state, 1e-4, 0.0, t=0)
    with pytest.raises(DimensionMismatch):
        adam_step([p], [np.zeros((2, 1))], state, 1e-4, 0.0, t=1)


def test_adam_wrapper_steps_and_zeroes() -> None:
    p = Tensor2([[2.0]])
    opt = Adam([p], lr=0.01)
    p.grad = np.array([[1.0]])
    opt.step()
    assert p.data[0, 0] < 2.0
    opt.zero_grad()
    assert p.grad is None


def test_tape_rejects_non_scalar_loss_and_double_backward() -> None:
    x = Tensor2([[1.0, 2.0]])
    tape = GradTape()
    y = tanh_ew(x, tape)
    with pytest.raises(DimensionMismatch):
        tape.backward(y)
    tape2 = GradTape()
    loss = log_sum_exp(tanh_ew(Tensor2([[0.3], [0.1]]), tape2), tape2)
    tape2.backward(loss)
    with pytest.raises(RuntimeError):
        tape2.backward(loss)


def test_grad_check_passes_on_linear_regression() -> None:
    rng = np.random.default_rng(11)
    x = Tensor2(rng.normal(size=(6, 3)))
    target = rng.normal(size=(6, 1))
    w = Tensor2(rng.normal(size=(3, 1)) * 0.3)
    b = Tensor2(np.zeros((1, 1)))

    def loss_fn(tape):
        pred = linear(x, w, b, tape)
        resid = add(pred, Tensor2(-target), tape)
        sq = mul_ew(resid, resid, tape)
        total = weighted_sum(Tensor2(np.ones((6, 1))), sq, tape)
        return scale(total, 1.0 / 6.0, tape)

    report = grad_check(loss_fn, [w, b], eps=1e-6, tol=1e-5)
    assert report.passed, str(report)
    assert report.n_checked == 4


def test_grad_check_constant_loss_gives_zero_grads() -> None:
    w = Tensor2([[0.7], [0.1]])

    def loss_fn(tape):
        return Tensor2([[42.0]])

    report = grad_check(loss_fn, [w], eps=1e-6, tol=1e-5)
    assert report.passed
    assert report.max_rel_err == 0.0


def test_grad_check_flags_corrupted_backward_rule() -> None:
    w = Tensor2([[0.5]])

    def bad_square(t: Tensor2, tape: GradTape) -> Tensor2:
        out = Tensor2(t.data ** 2)
        if tape is not None:
            def backward():
                if out.grad is None:
                    return
                if t.grad is None:
                    t.grad = np.zeros_like(t.data)
                t.grad += out.grad * 3.0 * t.data  # wrong on purpose: true rule is 2x
            tape.record(backward)
        return out

    def loss_fn(tape):
        if tape is None:
            return Tensor2(w.data ** 2)
        return bad_square(w, tape)

    report = grad_check(loss_fn, [w], eps=1e-6, tol=1e-5)
    assert not report.passed
    assert report.n_failed == 1
    assert report.failures[0][0] == 0


def _composite_loss(params, x_data, sel, labels):
    """Touches every primitive once; used for the whole-core FD sweep."""
    w1, w2, b2, wv, beta = params

    def loss_fn(tape):
        rng = np.random.default_rng(1234)  # fixed stream keeps the loss deterministic
        x = Tensor2(x_data)
        h = tanh_ew(linear(x, w1, tape=tape), tape)
        g = sigmoid_ew(linear(x, w2, b2, tape), tape)
        gated = mul_ew(h, g, tape)
        gated = dropout(gated, 0.25, rng=rng, training=True, tape=tape)
        scores = linear(gated, wv, tape=tape)
        att = softmax_subset(scores, sel, tape)
        picked = select_rows(x, sel, tape)
        pooled = weighted_sum(att, picked, tape)
        logits = linear(pooled, beta, tape=tape)
        ce = cross_entropy(logits, labels, tape)
        lse = log_sum_exp(scores, tape)
        return add(ce, scale(lse, 0.01, tape), tape)

    return loss_fn


def test_grad_check_composite_over_all_primitives() -> None:
    for seed in range(5):
        rng = np.random.default_rng(seed)
        n, d, h = 6, 4, 3
        x_data = rng.normal(size=(n, d))
        params = [
            Tensor2(rng.normal(size=(d, h)) * 0.5),
            Tensor2(rng.normal(size=(d, h)) * 0.5),
            Tensor2(rng.normal(size=(1, h)) * 0.5),
            Tensor2(rng.normal(size=(h, 1)) * 0.5),
            Tensor2(rng.normal(size=(d, 2)) * 0.5),
        ]
        sel = np.array([0, 2, 5])
        loss_fn = _composite_loss(params, x_data, sel, [1])
        report = grad_check(loss_fn, params, eps=1e-5, tol=1e-5)
        assert report.passed, f"seed {seed}: {report}"


def test_select_rows_accumulates_duplicate_indices() -> None:
    x = Tensor2(np.arange(6.0).reshape(3, 2))
    ones3 = Tensor2(np.ones((3, 1)))
    ones_col = Tensor2(np.ones((2, 1)))

    def loss_fn(tape):
        picked = select_rows(x, [1, 1, 2], tape)
        pooled = weighted_sum(ones3, picked, tape)  # (1,2) column sums
        return linear(pooled, ones_col, tape=tape)  # -> (1,1) total

    report = grad_check(loss_fn, [x], eps=1e-6, tol=1e-6)
    assert report.passed
    zero_grads([x])
    tape = GradTape()
    loss = loss_fn(tape)
    tape.backward(loss)
    np.testing.assert_array_equal(x.grad, np.array([[0.0, 0.0], [2.0, 2.0], [1.0, 1.0]]))


def test_concat_rows_routes_gradient_to_each_part() -> None:
    a = Tensor2([[1.0]])
    b = Tensor2([[2.0], [3.0]])
    ones = Tensor2(np.ones((1, 1)))

    def loss_fn(tape):
        col = concat_rows([a, b], tape)
        weights = Tensor2(np.array([[1.0], [10.0], [100.0]]))
        return weighted_sum(weights, col, tape)

    zero_grads([a, b])
    tape = GradTape()
    loss = loss_fn(tape)
    assert loss.data[0, 0] == pytest.approx(1.0 + 20.0 + 300.0)
    tape.backward(loss)
    np.testing.assert_array_equal(a.grad, [[1.0]])
    np.testing.assert_array_equal(b.grad, [[10.0], [100.0]])
    assert ones.grad is None


def test_forward_passes_are_bitwise_repeatable() -> None:
    rng = np.random.default_rng(5)
    x_data = rng.normal(size=(6, 4))
    params = [
        Tensor2(rng.normal(size=(4, 3)) * 0.5),
        Tensor2(rng.normal(size=(4, 3)) * 0.5),
        Tensor2(rng.normal(size=(1, 3)) * 0.5),
        Tensor2(rng.normal(size=(3, 1)) * 0.5),
        Tensor2(rng.normal(size=(4, 2)) * 0.5),
    ]
    loss_fn = _composite_loss(params, x_data, np.array([0, 2, 5]), [1])
    first = loss_fn(None).data[0, 0]
    second = loss_fn(None).data[0, 0]
    assert first == second
