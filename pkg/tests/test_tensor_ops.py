"""Primitive-level checks: forward semantics, exact adjoint identities, and
finite-difference validation of every backward rule (first and second order).
"""
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedrecon.engine import Tensor, grad, grad_check, ops
from fedrecon.engine.gradcheck import primitive_suites
from fedrecon.errors import ShapeMismatchError


def test_every_backward_rule_passes_fd_check():
    results = primitive_suites(seed=0)
    bad = [r for r in results if not r.passed]
    assert not bad, "failing rules: " + ", ".join(f"{r.name}={r.max_rel_err:.2e}" for r in bad)


def test_gradcheck_quadratic_is_exact():
    err = grad_check(lambda t: ops.sum_all(ops.square(t)), np.array([0.3, -1.2, 2.0]), 1e-5)
    assert err < 1e-8


def test_gradcheck_rejects_bad_step():
    with pytest.raises(ValueError):
        grad_check(lambda t: ops.sum_all(t), np.ones(3), 0.0)


def test_second_order_of_square_matches_analytic():
    x = Tensor(np.array([1.0, -2.0, 0.5]), requires_grad=True)
    y = ops.sum_all(ops.square(x))
    (g1,) = grad(y, [x], create_graph=True)
    z = ops.sum_all(ops.square(g1))  # sum 4x^2, dz/dx = 8x
    (g2,) = grad(z, [x])
    np.testing.assert_allclose(g2.data, 8.0 * x.data, rtol=1e-12)


def test_relu_second_derivative_is_zero():
    x = Tensor(np.array([-1.0, 0.5, 2.0]), requires_grad=True)
    (g1,) = grad(ops.sum_all(ops.square(ops.relu(x))), [x], create_graph=True)
    (g2,) = grad(ops.sum_all(g1), [x])
    # d/dx [2 relu(x) mask] = 2 mask; the mask itself contributes nothing
    np.testing.assert_allclose(g2.data, 2.0 * (x.data > 0), rtol=0, atol=0)


def test_matmul_shape_error_names_dims():
    with pytest.raises(ShapeMismatchError, match=r"\(2, 3\) @ \(2, 3\)"):
        ops.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


def test_softmax_xent_uniform_logits_is_log_c():
    for c in (2, 5, 10):
        logits = Tensor(np.zeros((4, c)))
        onehot = np.eye(c)[np.zeros(4, dtype=int)]
        loss = ops.softmax_xent(logits, onehot)
        assert loss.item() == pytest.approx(np.log(c), rel=1e-12)


def test_softmax_xent_confident_correct_loss_vanishes():
    logits = np.zeros((2, 4))
    logits[:, 1] = 60.0
    onehot = np.eye(4)[np.ones(2, dtype=int)]
    loss = ops.softmax_xent(Tensor(logits), onehot)
    assert loss.item() < 1e-20


def test_sigmoid_is_stable_at_extremes():
    out = ops.sigmoid(Tensor(np.array([-800.0, 0.0, 800.0])))
    np.testing.assert_allclose(out.data, [0.0, 0.5, 1.0], atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(
    n=st.integers(1, 3),
    ci=st.integers(1, 3),
    co=st.integers(1, 3),
    hw=st.integers(3, 7),
    k=st.integers(1, 3),
    stride=st.integers(1, 2),
    pad=st.integers(0, 1),
    seed=st.integers(0, 10_000),
)
def test_conv_adjoint_identities(n, ci, co, hw, k, stride, pad, seed):
    """<conv(x,w), g> == <x, dinput(g,w)> == <w, dweight(x,g)> exactly-ish."""
    if hw + 2 * pad < k:
        return
    r = np.random.default_rng(seed)
    x = r.standard_normal((n, ci, hw, hw))
    w = r.standard_normal((co, ci, k, k))
    y = ops.conv2d(Tensor(x), Tensor(w), (stride, stride), (pad, pad)).data
    g = r.standard_normal(y.shape)
    lhs = float(np.sum(y * g))
    dx = ops.conv2d_dinput(Tensor(g), Tensor(w), (stride, stride), (pad, pad), (hw, hw)).data
    dw = ops.conv2d_dweight(Tensor(x), Tensor(g), (stride, stride), (pad, pad), (k, k)).data
    assert lhs == pytest.approx(float(np.sum(x * dx)), rel=1e-10)
    assert lhs == pytest.approx(float(np.sum(w * dw)), rel=1e-10)


@settings(max_examples=25, deadline=None)
@given(
    n=st.integers(1, 2),
    c=st.integers(1, 2),
    hw=st.sampled_from([4, 6]),
    seed=st.integers(0, 10_000),
)
def test_pool_take_scatter_adjoint(n, c, hw, seed):
    r = np.random.default_rng(seed)
    x = r.standard_normal((n, c, hw, hw))
    pooled = ops.maxpool2d(Tensor(x), 2)
    g = r.standard_normal(pooled.shape)
    idx = pooled.ctx["idx"]
    back = ops.pool_scatter(Tensor(g), idx, (hw, hw)).data
    assert float(np.sum(pooled.data * g)) == pytest.approx(float(np.sum(x * back)), rel=1e-10)


@settings(max_examples=30, deadline=None)
@given(
    rows=st.integers(1, 4),
    cols=st.integers(1, 4),
    seed=st.integers(0, 10_000),
)
def test_broadcast_sum_to_roundtrip(rows, cols, seed):
    r = np.random.default_rng(seed)
    x = r.standard_normal((1, cols))
    up = ops.broadcast_to(Tensor(x), (rows, cols))
    down = ops.sum_to(up, (1, cols))
    np.testing.assert_allclose(down.data, rows * x, rtol=1e-12)


def test_maxpool_matches_naive_loops():
    r = np.random.default_rng(3)
    x = r.standard_normal((2, 3, 6, 6))
    out = ops.maxpool2d(Tensor(x), 2).data
    for n in range(2):
        for c in range(3):
            for i in range(3):
                for j in range(3):
                    window = x[n, c, 2 * i : 2 * i + 2, 2 * j : 2 * j + 2]
                    assert out[n, c, i, j] == window.max()


def test_avgpool_matches_naive():
    r = np.random.default_rng(4)
    x = r.standard_normal((1, 2, 4, 4))
    out = ops.avgpool2d(Tensor(x), 2).data
    np.testing.assert_allclose(out[0, 0, 0, 0], x[0, 0, :2, :2].mean(), rtol=1e-12)


def test_values_are_immutable_enough_for_graph_reuse():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    y = ops.mul(x, x)
    before = y.data.copy()
    grad(ops.sum_all(y), [x])
    np.testing.assert_array_equal(y.data, before)
