"""Contracts of the model-facing engine surface, checked against independent
oracles: hand-rolled scalar arithmetic, closed forms, finite differences.
"""
import numpy as np
import pytest

from fedrecon.engine import (
    FlatGradient,
    LayoutEntry,
    Tensor,
    data_grad_of_match_loss,
    forward_loss,
    grad_check,
    match_loss_and_data_grad,
    one_hot,
    param_grad,
    param_tensors,
    ops,
)
from fedrecon.errors import LayoutMismatchError, ShapeMismatchError
from fedrecon import models


class SquaredResidualModel:
    """L(theta; x) = (theta*x - t)^2 summed over the batch."""

    def __init__(self, theta, target):
        self.layout = (LayoutEntry("theta", (1,), 0),)
        self.values = np.array([float(theta)])
        self.target = float(target)

    def param_values(self):
        return self.values

    def loss_graph(self, params, inputs, labels):
        pred = ops.mul(params[0], inputs)
        return ops.sum_all(ops.square(ops.sub(pred, Tensor(self.target))))


def test_param_grad_matches_hand_derivative():
    # d/dtheta (theta*x - t)^2 = 2x(theta*x - t) = 2*2*(2-1) = 4
    model = SquaredResidualModel(theta=1.0, target=1.0)
    g = param_grad(model, np.array([2.0]), labels=None)
    assert g.values[0] == pytest.approx(4.0, rel=1e-12)


def test_param_grad_zero_at_interpolating_optimum():
    model = SquaredResidualModel(theta=0.5, target=1.0)
    g = param_grad(model, np.array([2.0]), labels=None)  # theta*x == t
    assert abs(g.values[0]) < 1e-10


def test_forward_loss_uniform_logits(tiny_mlp):
    spec = models.ArchSpec("mlp", (1, 5, 5), 4, width_scale=0.25)
    model = models.build_model(spec, seed=0)
    zeroed = model.with_values(np.zeros_like(model.values))
    loss = forward_loss(zeroed, np.zeros((3, 1, 5, 5)), np.array([0, 1, 3]))
    assert loss == pytest.approx(np.log(4), rel=1e-12)


def test_forward_loss_against_scalar_recomputation(rng):
    """Two-layer MLP, batch 3: recompute the loss with plain float arithmetic."""
    spec = models.ArchSpec("mlp", (1, 3, 3), 3, width_scale=0.25)
    model = models.build_model(spec, seed=21)
    x = rng.uniform(0, 1, (3, 1, 3, 3))
    labels = np.array([0, 2, 1])
    got = forward_loss(model, x, labels)

    w1 = model.values[model.layout[0].offset : model.layout[0].offset + model.layout[0].size].reshape(model.layout[0].shape)
    b1 = model.values[model.layout[1].offset : model.layout[1].offset + model.layout[1].size]
    w2 = model.values[model.layout[2].offset : model.layout[2].offset + model.layout[2].size].reshape(model.layout[2].shape)
    b2 = model.values[model.layout[3].offset : model.layout[3].offset + model.layout[3].size]

    total = 0.0
    for b in range(3):
        hidden = []
        flat = x[b].reshape(-1)
        for j in range(w1.shape[1]):
            pre = sum(flat[i] * w1[i, j] for i in range(w1.shape[0])) + b1[j]
            hidden.append(1.0 / (1.0 + np.exp(-pre)))
        logits = []
        for k in range(w2.shape[1]):
            logits.append(sum(hidden[j] * w2[j, k] for j in range(w2.shape[0])) + b2[k])
        mx = max(logits)
        lse = mx + np.log(sum(np.exp(v - mx) for v in logits))
        total += lse - logits[labels[b]]
    assert got == pytest.approx(total / 3.0, rel=1e-12)


def test_forward_loss_shape_error_names_dimensions(tiny_lenet):
    with pytest.raises(ShapeMismatchError, match=r"\(2, 1, 9, 9\)"):
        forward_loss(tiny_lenet, np.zeros((2, 1, 9, 9)), np.array([0, 1]))


def test_param_grad_fd_on_lenet(tiny_lenet, rng):
    x = rng.uniform(0, 1, (2, *tiny_lenet.spec.input_shape))
    labels = rng.integers(0, 3, size=2)
    analytic = param_grad(tiny_lenet, x, labels).values
    flat = tiny_lenet.param_values()
    step = 1e-5
    for i in rng.choice(flat.size, size=64, replace=False):
        bumped = flat.copy()
        bumped[i] += step
        hi = forward_loss(tiny_lenet.with_values(bumped), x, labels)
        bumped[i] -= 2 * step
        lo = forward_loss(tiny_lenet.with_values(bumped), x, labels)
        central = (hi - lo) / (2 * step)
        assert abs(analytic[i] - central) / max(1e-8, abs(central)) < 1e-4


def test_gradient_linearity_over_batch(tiny_lenet, rng):
    x = rng.uniform(0, 1, (4, *tiny_lenet.spec.input_shape))
    labels = rng.integers(0, 3, size=4)
    whole = param_grad(tiny_lenet, x, labels).values
    per_sample = [
        param_grad(tiny_lenet, x[i : i + 1], labels[i : i + 1]).values for i in range(4)
    ]
    np.testing.assert_allclose(whole, np.mean(per_sample, axis=0), rtol=1e-10)


def test_param_grad_is_bit_deterministic(tiny_lenet, rng):
    x = rng.uniform(0, 1, (2, *tiny_lenet.spec.input_shape))
    labels = rng.integers(0, 3, size=2)
    a = param_grad(tiny_lenet, x, labels).values
    b = param_grad(tiny_lenet, x, labels).values
    assert np.array_equal(a, b)


def test_data_grad_linear_scalar_analytic(scalar_linear_model):
    # grad_theta L = x, match = (x - g)^2, d/dx = 2(x - g) = 4 at x=3, g=1
    target = FlatGradient(np.array([1.0]), scalar_linear_model.layout)
    got = data_grad_of_match_loss(scalar_linear_model, np.array([3.0]), None, target)
    assert got.data[0] == pytest.approx(4.0, rel=1e-12)


def test_data_grad_zero_at_global_minimum(tiny_lenet, rng):
    truth = rng.uniform(0, 1, (2, *tiny_lenet.spec.input_shape))
    labels = rng.integers(0, 3, size=2)
    target = param_grad(tiny_lenet, truth, labels)
    loss, dx = match_loss_and_data_grad(tiny_lenet, truth, labels, target)
    assert loss == 0.0
    assert np.all(dx == 0.0)


def test_data_grad_fd_on_small_cnn(tiny_lenet, rng):
    truth = rng.uniform(0, 1, (2, *tiny_lenet.spec.input_shape))
    labels = rng.integers(0, 3, size=2)
    target = param_grad(tiny_lenet, truth, labels)
    x = rng.uniform(0, 1, truth.shape)
    _, analytic = match_loss_and_data_grad(tiny_lenet, x, labels, target)
    step = 1e-5
    flat = x.reshape(-1)
    for i in rng.choice(flat.size, size=48, replace=False):
        bumped = flat.copy()
        bumped[i] += step
        hi, _ = match_loss_and_data_grad(tiny_lenet, bumped.reshape(x.shape), labels, target)
        bumped[i] -= 2 * step
        lo, _ = match_loss_and_data_grad(tiny_lenet, bumped.reshape(x.shape), labels, target)
        central = (hi - lo) / (2 * step)
        assert abs(analytic.reshape(-1)[i] - central) / max(1e-8, abs(central)) < 1e-3


def test_masked_rows_are_exactly_zero(tiny_lenet, rng):
    truth = rng.uniform(0, 1, (3, *tiny_lenet.spec.input_shape))
    labels = rng.integers(0, 3, size=3)
    target = param_grad(tiny_lenet, truth, labels)
    x = rng.uniform(0, 1, truth.shape)
    mask = np.array([True, False, True])
    got = data_grad_of_match_loss(tiny_lenet, x, labels, target, update_mask=mask)
    assert np.all(got.data[1] == 0.0)
    assert np.any(got.data[0] != 0.0)


def test_layout_mismatch_is_structured(tiny_lenet, tiny_mlp, rng):
    x = rng.uniform(0, 1, (1, *tiny_mlp.spec.input_shape))
    target = param_grad(tiny_mlp, x, np.array([0]))
    bad_inputs = rng.uniform(0, 1, (1, *tiny_lenet.spec.input_shape))
    with pytest.raises(LayoutMismatchError):
        data_grad_of_match_loss(tiny_lenet, bad_inputs, np.array([0]), target)


def test_grad_check_on_forward_loss_and_match_loss(tiny_mlp, rng):
    labels = np.array([0, 1])
    truth = rng.uniform(0, 1, (2, *tiny_mlp.spec.input_shape))
    target = param_grad(tiny_mlp, truth, labels)

    def loss_of_inputs(t):
        params = [
            Tensor(tiny_mlp.values[e.offset : e.offset + e.size].reshape(e.shape))
            for e in tiny_mlp.layout
        ]
        return tiny_mlp.loss_graph(params, t, labels)

    assert grad_check(loss_of_inputs, truth, 1e-5) < 1e-4

    def match_of_inputs(t):
        params = param_tensors(tiny_mlp)
        from fedrecon.engine.api import _match_graph

        return _match_graph(tiny_mlp, params, t, labels, target)

    start = rng.uniform(0, 1, truth.shape)
    assert grad_check(match_of_inputs, start, 1e-5) < 1e-3


def test_gradients_stable_under_concurrent_calls(tiny_lenet, rng):
    """Engine values are immutable and grad is pure: threads must agree."""
    import concurrent.futures

    x = rng.uniform(0, 1, (2, *tiny_lenet.spec.input_shape))
    labels = rng.integers(0, 3, size=2)
    expected = param_grad(tiny_lenet, x, labels).values
    with concurrent.futures.ThreadPoolExecutor(max_workers=4) as pool:
        results = list(
            pool.map(lambda _: param_grad(tiny_lenet, x, labels).values, range(8))
        )
    for got in results:
        assert np.array_equal(got, expected)


def test_one_hot_validates_range():
    with pytest.raises(ShapeMismatchError):
        one_hot(np.array([0, 5]), 3)
    got = one_hot(np.array([1, 0]), 3)
    np.testing.assert_array_equal(got, [[0, 1, 0], [1, 0, 0]])


def test_flat_gradient_layout_must_partition():
    layout = (LayoutEntry("a", (2,), 0), LayoutEntry("b", (3,), 2))
    FlatGradient(np.zeros(5), layout)  # fine
    with pytest.raises(LayoutMismatchError):
        FlatGradient(np.zeros(6), layout)
    with pytest.raises(LayoutMismatchError):
        FlatGradient(np.zeros(5), (LayoutEntry("a", (2,), 1), LayoutEntry("b", (3,), 3)))
