import numpy as np
import pytest

from fedrecon import models
from fedrecon.engine import Tensor, ops


FIXTURES = __file__.rsplit("/", 1)[0] + "/fixtures"


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(1234)


class ScalarLinearModel:
    """One parameter theta with loss theta * sum(x): grad_theta L = sum(x).

    The simplest model whose parameter gradient equals the input, so the
    match loss is (x - g)^2 with a hand-checkable pixel gradient.
    """

    def __init__(self, theta: float = 1.0):
        from fedrecon.engine import LayoutEntry

        self.layout = (LayoutEntry("theta", (1,), 0),)
        self.values = np.array([theta])

    def param_values(self):
        return self.values

    def loss_graph(self, params, inputs, labels):
        return ops.sum_all(ops.mul(params[0], ops.sum_all(inputs)))


class SigmoidPairModel:
    """One parameter, two-class logits (theta*x, -theta*x), cross-entropy.

    grad_theta and the match-loss recursion have closed scalar forms used as
    an independent oracle for the reconstruction update rule.
    """

    def __init__(self, theta: float):
        from fedrecon.engine import LayoutEntry

        self.layout = (LayoutEntry("theta", (1,), 0),)
        self.values = np.array([float(theta)])
        self.spec_classes = 2

    def param_values(self):
        return self.values

    def loss_graph(self, params, inputs, labels):
        from fedrecon.engine import one_hot

        flat = ops.reshape(inputs, (inputs.shape[0], 1))
        pos = ops.mul(flat, params[0])
        neg = ops.neg(pos)
        # logits (B, 2) assembled by broadcasting each column into place
        col = np.zeros((1, 2))
        col[0, 0] = 1.0
        other = np.zeros((1, 2))
        other[0, 1] = 1.0
        logits = ops.add(ops.mul(pos, Tensor(col)), ops.mul(neg, Tensor(other)))
        return ops.softmax_xent(logits, one_hot(labels, 2))


@pytest.fixture
def scalar_linear_model():
    return ScalarLinearModel()


@pytest.fixture
def sigmoid_pair_model():
    return SigmoidPairModel(theta=0.8)


@pytest.fixture(scope="session")
def tiny_lenet():
    spec = models.ArchSpec("lenet_small", (1, 8, 8), 3, width_scale=0.25)
    return models.build_model(spec, seed=11)


@pytest.fixture(scope="session")
def tiny_mlp():
    spec = models.ArchSpec("mlp", (1, 5, 5), 3, width_scale=0.25)
    return models.build_model(spec, seed=7)
