"""Finite-difference validation suites for the engine.

Three layers of checking:
  - per-primitive: every backward rule, first order and (through a recorded
    gradient) second order, probed at inputs kept away from kinks and ties;
  - model level: param_grad of randomized smooth models against central
    differences;
  - match-loss level: the pixel gradient of the gradient-match objective
    (the second-order production path) against central differences.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .api import grad_check, match_loss_and_data_grad, param_grad
from .tensor import Tensor, grad


@dataclass
class SuiteResult:
    name: str
    max_rel_err: float
    threshold: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.threshold


def _away_from_zero(rng, shape, low=0.2, high=1.0):
    signs = rng.choice([-1.0, 1.0], size=shape)
    return signs * rng.uniform(low, high, size=shape)


def _positive(rng, shape, low=0.5, high=1.5):
    return rng.uniform(low, high, size=shape)


def _op_probes(rng):
    """(name, f, point) triples; each f maps one Tensor to a scalar."""
    a = rng.standard_normal((3, 4))
    b = rng.standard_normal((4, 2))
    row = rng.standard_normal((1, 4))
    w = rng.standard_normal((2, 3, 3, 3)) * 0.5
    x4 = rng.standard_normal((2, 3, 6, 6))
    gy = rng.standard_normal((2, 2, 4, 4))
    onehot = np.zeros((3, 4))
    onehot[np.arange(3), rng.integers(0, 4, size=3)] = 1.0
    # maxpool ties are measure-zero for continuous draws; nudge anyway
    xpool = rng.standard_normal((1, 2, 4, 4))
    xpool += np.linspace(0, 1e-3, xpool.size).reshape(xpool.shape)

    def scalar(t):
        return ops.sum_all(ops.square(t))

    probes = [
        ("add", lambda t: scalar(ops.add(t, Tensor(a))), rng.standard_normal((3, 4))),
        ("sub", lambda t: scalar(ops.sub(Tensor(a), t)), rng.standard_normal((3, 4))),
        ("mul", lambda t: scalar(ops.mul(t, Tensor(a))), rng.standard_normal((3, 4))),
        ("mul_broadcast", lambda t: scalar(ops.mul(t, Tensor(row))), rng.standard_normal((3, 4))),
        ("neg", lambda t: scalar(ops.neg(t)), rng.standard_normal((3, 4))),
        ("square", lambda t: ops.sum_all(ops.square(t)), rng.standard_normal((3, 4))),
        ("exp", lambda t: scalar(ops.exp(t)), rng.uniform(-1, 1, (3, 4))),
        ("log", lambda t: scalar(ops.log(t)), _positive(rng, (3, 4))),
        ("reciprocal", lambda t: scalar(ops.reciprocal(t)), _away_from_zero(rng, (3, 4))),
        ("sqrt", lambda t: scalar(ops.sqrt(t)), _positive(rng, (3, 4))),
        ("relu", lambda t: scalar(ops.relu(t)), _away_from_zero(rng, (3, 4))),
        ("sigmoid", lambda t: scalar(ops.sigmoid(t)), rng.standard_normal((3, 4))),
        ("sum_all", lambda t: ops.square(ops.sum_all(t)), rng.standard_normal((3, 4))),
        ("sum_axis", lambda t: scalar(ops.sum_axis(t, 1)), rng.standard_normal((3, 4))),
        ("broadcast_to", lambda t: scalar(ops.broadcast_to(t, (3, 4))), rng.standard_normal((1, 4))),
        ("sum_to", lambda t: scalar(ops.sum_to(t, (1, 4))), rng.standard_normal((3, 4))),
        ("reshape", lambda t: scalar(ops.reshape(t, (4, 3))), rng.standard_normal((3, 4))),
        ("transpose", lambda t: scalar(ops.transpose(t)), rng.standard_normal((3, 4))),
        ("matmul", lambda t: scalar(ops.matmul(t, Tensor(b))), rng.standard_normal((3, 4))),
        ("matmul_rhs", lambda t: scalar(ops.matmul(Tensor(a), t)), rng.standard_normal((4, 2))),
        ("conv2d", lambda t: scalar(ops.conv2d(t, Tensor(w), (1, 1), (1, 1))), x4),
        ("conv2d_weight", lambda t: scalar(ops.conv2d(Tensor(x4), t, (2, 2), (1, 1))), w),
        ("conv2d_dinput", lambda t: scalar(ops.conv2d_dinput(t, Tensor(w), (1, 1), (1, 1), (4, 4))), gy[:, :, :4, :4]),
        ("conv2d_dweight", lambda t: scalar(ops.conv2d_dweight(Tensor(x4), t, (1, 1), (0, 0), (3, 3))), rng.standard_normal((2, 2, 4, 4))),
        ("maxpool", lambda t: scalar(ops.maxpool2d(t, 2)), xpool),
        ("avgpool", lambda t: scalar(ops.avgpool2d(t, 2)), rng.standard_normal((1, 2, 4, 4))),
        ("avgpool_unpool", lambda t: scalar(ops.avgpool_unpool(t, 2, (4, 4))), rng.standard_normal((1, 2, 2, 2))),
        ("softmax_xent", lambda t: ops.softmax_xent(t, onehot), rng.standard_normal((3, 4))),
        ("bias_add", lambda t: scalar(ops.bias_add(Tensor(x4), t)), rng.standard_normal((3,))),
        ("flatten", lambda t: scalar(ops.flatten(t)), rng.standard_normal((2, 2, 3, 3))),
    ]
    return probes


def _second_order_wrapper(f):
    """x -> sum of squares of d f / d x, built with create_graph."""

    def h(t: Tensor) -> Tensor:
        # FD probes pass constants; the inner derivative still needs a leaf
        tt = t if t.requires_grad else Tensor(t.data, requires_grad=True)
        out = f(tt)
        (g,) = grad(out, [tt], create_graph=True)
        return ops.sum_all(ops.square(g))

    return h


def primitive_suites(seed: int = 0, threshold: float = 1e-6, step: float = 1e-5):
    """First- and second-order FD checks of every backward rule."""
    results = []
    rng = np.random.default_rng(seed)
    for name, f, point in _op_probes(rng):
        err1 = grad_check(f, point, step)
        err2 = grad_check(_second_order_wrapper(f), point, step)
        results.append(SuiteResult(f"op/{name}", err1, threshold))
        results.append(SuiteResult(f"op2/{name}", err2, 100 * threshold))
    return results


def _random_model(rng):
    from .. import models  # deferred to keep the engine importable standalone

    kind = rng.integers(0, 2)
    classes = int(rng.integers(2, 5))
    if kind == 0:
        spec = models.ArchSpec("mlp", (1, 5, 5), classes, width_scale=0.25)
    else:
        spec = models.ArchSpec("lenet_small", (1, 8, 8), classes, width_scale=0.25)
    return models.build_model(spec, seed=int(rng.integers(0, 2**31)))


def param_fd_suite(trials: int, seed: int = 0, threshold: float = 1e-4, step: float = 1e-3):
    """param_grad vs central differences over randomized smooth configurations.

    Uses the fourth-order central stencil at step 1e-3: parameter-gradient
    coordinates span eight orders of magnitude, and the 2-point rule at any
    single step is either rounding- or truncation-limited on the smallest of
    them. The 5-point rule keeps both error terms ~1e-12, two orders below
    the relative threshold at the 1e-8 denominator floor.
    """
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        model = _random_model(rng)
        batch = int(rng.integers(1, 5))
        x = rng.uniform(0, 1, (batch, *model.spec.input_shape))
        labels = rng.integers(0, model.spec.num_classes, size=batch)
        analytic = param_grad(model, x, labels).values
        flat = model.param_values()
        for i in range(flat.size):
            central = _central4(lambda v: _loss_at_coord(model, flat, i, v, x, labels), flat[i], step)
            err = abs(analytic[i] - central) / max(1e-8, abs(central))
            worst = max(worst, err)
    return SuiteResult(f"model/param_grad[{trials}]", worst, threshold)


def _central4(f, at: float, h: float) -> float:
    """Fourth-order central difference: (-f(+2h) + 8f(+h) - 8f(-h) + f(-2h)) / 12h."""
    return (-f(at + 2 * h) + 8 * f(at + h) - 8 * f(at - h) + f(at - 2 * h)) / (12 * h)


def _loss_at_coord(model, flat, i, value, x, labels) -> float:
    bumped = flat.copy()
    bumped[i] = value
    return _loss_at(model, bumped, x, labels)


def _loss_at(model, flat, x, labels) -> float:
    loss = model.loss_graph(
        [
            Tensor(flat[e.offset : e.offset + e.size].reshape(e.shape))
            for e in model.layout
        ],
        Tensor(x),
        labels,
    )
    return float(loss.data)


def data_fd_suite(trials: int, seed: int = 0, threshold: float = 1e-3, step: float = 1e-5):
    """The second-order pixel gradient of the match loss vs central differences."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        model = _random_model(rng)
        batch = int(rng.integers(1, 3))
        shape = (batch, *model.spec.input_shape)
        truth = rng.uniform(0, 1, shape)
        labels = rng.integers(0, model.spec.num_classes, size=batch)
        target = param_grad(model, truth, labels)
        x = rng.uniform(0, 1, shape)
        _, analytic = match_loss_and_data_grad(model, x, labels, target)
        flat = x.reshape(-1)
        ana = analytic.reshape(-1)
        for i in range(flat.size):
            bumped = x.copy().reshape(-1)
            bumped[i] += step
            hi, _ = match_loss_and_data_grad(model, bumped.reshape(shape), labels, target)
            bumped[i] -= 2 * step
            lo, _ = match_loss_and_data_grad(model, bumped.reshape(shape), labels, target)
            central = (hi - lo) / (2 * step)
            err = abs(ana[i] - central) / max(1e-8, abs(central))
            worst = max(worst, err)
    return SuiteResult(f"model/match_data_grad[{trials}]", worst, threshold)


def run_all(param_trials: int = 6, data_trials: int = 2, seed: int = 0):
    results = primitive_suites(seed)
    results.append(param_fd_suite(param_trials, seed))
    results.append(data_fd_suite(data_trials, seed))
    return results
