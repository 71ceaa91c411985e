import numpy as np

from fedrecon.engine import Tensor, grad, ops, param_tensors, record


def test_replay_reproduces_scalar_chain_bitwise():
    x = Tensor(np.array([0.3, -1.7, 2.2]), requires_grad=True)
    y = ops.sum_all(ops.square(ops.sigmoid(ops.mul(x, Tensor(3.0)))))
    rec = record(y)
    assert np.array_equal(rec.replay(), y.data)


def test_replay_reproduces_model_loss_bitwise(tiny_lenet, rng):
    x = rng.uniform(0, 1, (2, *tiny_lenet.spec.input_shape))
    labels = rng.integers(0, 3, size=2)
    loss = tiny_lenet.loss_graph(param_tensors(tiny_lenet), Tensor(x), labels)
    rec = record(loss)
    assert rec.replay().tobytes() == loss.data.tobytes()
    used = set(rec.ops_used())
    assert {"conv2d", "sigmoid", "matmul", "add", "reshape", "softmax_xent"} <= used


def test_replay_covers_backward_recording(tiny_mlp, rng):
    """The gradient-of-gradient graph replays bit-identically too."""
    x = Tensor(rng.uniform(0, 1, (1, *tiny_mlp.spec.input_shape)), requires_grad=True)
    params = param_tensors(tiny_mlp)
    loss = tiny_mlp.loss_graph(params, x, np.array([1]))
    grads = grad(loss, params, create_graph=True)
    match = None
    for g in grads:
        term = ops.sum_all(ops.square(g))
        match = term if match is None else ops.add(match, term)
    (dx,) = grad(match, [x], create_graph=True)
    total = ops.sum_all(dx)
    rec = record(total)
    assert rec.replay().tobytes() == total.data.tobytes()
    assert "conv2d_dweight" not in rec.ops_used()  # mlp has no convolutions
    assert "matmul" in rec.ops_used()


def test_nodes_are_topologically_ordered(tiny_mlp, rng):
    x = Tensor(rng.uniform(0, 1, (1, *tiny_mlp.spec.input_shape)))
    loss = tiny_mlp.loss_graph(
        [Tensor(v.data) for v in param_tensors(tiny_mlp)], x, np.array([0])
    )
    rec = record(loss)
    for i, node in enumerate(rec.nodes):
        assert all(p < i for p in node.parents)
