"""Primitive operations of the engine.

The op set is closed and fixed: matmul, conv2d (+ its two adjoints), pooling
(take/scatter for max, avgpool/unpool), softmax cross-entropy, elementwise
add/sub/mul/neg/square/exp/log/reciprocal/sqrt/relu/sigmoid, reductions
(sum_all, sum_axis, sum_to) and data movement (reshape, transpose,
broadcast_to). Every backward rule emits its result through these same
primitives, which is what makes the recorded gradient differentiable a second
time. Rules live in the RULES registry keyed by op name; forward kernels in
FORWARD (used both to build nodes and to replay recordings bit-identically).

Subgradient conventions: relu'(0) = 0, and the max selections inside pooling
are constants of the backward pass (first occurrence wins), so their second
derivative contribution is zero.
"""
from __future__ import annotations

import numpy as np

from ..errors import ShapeMismatchError
from . import kernels
from .tensor import Tensor

FORWARD: dict = {}
RULES: dict = {}


def _forward(name):
    def deco(fn):
        FORWARD[name] = fn
        return fn

    return deco


def _rule(name):
    def deco(fn):
        RULES[name] = fn
        return fn

    return deco


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _build(op: str, parents: tuple, ctx: dict) -> Tensor:
    data = FORWARD[op](tuple(p.data for p in parents), ctx)
    return Tensor._from_op(data, op, parents, ctx)


# ---------------------------------------------------------------- elementwise


def _broadcastable(a, b, op):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatchError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast")


@_forward("add")
def _add_fwd(p, ctx):
    return p[0] + p[1]


@_rule("add")
def _add_bwd(g, node):
    a, b = node.parents
    return (sum_to(g, a.shape), sum_to(g, b.shape))


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcastable(a, b, "add")
    return _build("add", (a, b), {})


@_forward("sub")
def _sub_fwd(p, ctx):
    return p[0] - p[1]


@_rule("sub")
def _sub_bwd(g, node):
    a, b = node.parents
    return (sum_to(g, a.shape), sum_to(neg(g), b.shape))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcastable(a, b, "sub")
    return _build("sub", (a, b), {})


@_forward("mul")
def _mul_fwd(p, ctx):
    return p[0] * p[1]


@_rule("mul")
def _mul_bwd(g, node):
    a, b = node.parents
    ga = sum_to(mul(g, b), a.shape) if a.requires_grad else None
    gb = sum_to(mul(g, a), b.shape) if b.requires_grad else None
    return (ga, gb)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcastable(a, b, "mul")
    return _build("mul", (a, b), {})


@_forward("neg")
def _neg_fwd(p, ctx):
    return -p[0]


@_rule("neg")
def _neg_bwd(g, node):
    return (neg(g),)


def neg(x) -> Tensor:
    return _build("neg", (_as_tensor(x),), {})


@_forward("square")
def _square_fwd(p, ctx):
    return np.square(p[0])


@_rule("square")
def _square_bwd(g, node):
    (x,) = node.parents
    return (mul(g, mul(x, Tensor(2.0))),)


def square(x) -> Tensor:
    return _build("square", (_as_tensor(x),), {})


@_forward("exp")
def _exp_fwd(p, ctx):
    return np.exp(p[0])


@_rule("exp")
def _exp_bwd(g, node):
    return (mul(g, node),)


def exp(x) -> Tensor:
    return _build("exp", (_as_tensor(x),), {})


@_forward("log")
def _log_fwd(p, ctx):
    return np.log(p[0])


@_rule("log")
def _log_bwd(g, node):
    (x,) = node.parents
    return (mul(g, reciprocal(x)),)


def log(x) -> Tensor:
    return _build("log", (_as_tensor(x),), {})


@_forward("reciprocal")
def _recip_fwd(p, ctx):
    return 1.0 / p[0]


@_rule("reciprocal")
def _recip_bwd(g, node):
    return (neg(mul(g, square(node))),)


def reciprocal(x) -> Tensor:
    return _build("reciprocal", (_as_tensor(x),), {})


@_forward("sqrt")
def _sqrt_fwd(p, ctx):
    return np.sqrt(p[0])


@_rule("sqrt")
def _sqrt_bwd(g, node):
    return (mul(g, reciprocal(mul(node, Tensor(2.0)))),)


def sqrt(x) -> Tensor:
    return _build("sqrt", (_as_tensor(x),), {})


@_forward("relu")
def _relu_fwd(p, ctx):
    return np.maximum(p[0], 0.0)


@_rule("relu")
def _relu_bwd(g, node):
    mask = (node.parents[0].data > 0).astype(np.float64)
    return (mul(g, Tensor(mask)),)


def relu(x) -> Tensor:
    return _build("relu", (_as_tensor(x),), {})


@_forward("sigmoid")
def _sigmoid_fwd(p, ctx):
    x = p[0]
    z = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))


@_rule("sigmoid")
def _sigmoid_bwd(g, node):
    return (mul(mul(g, node), sub(Tensor(1.0), node)),)


def sigmoid(x) -> Tensor:
    return _build("sigmoid", (_as_tensor(x),), {})


# ------------------------------------------------------- reductions/movement


@_forward("sum_all")
def _sum_all_fwd(p, ctx):
    return np.sum(p[0])


@_rule("sum_all")
def _sum_all_bwd(g, node):
    return (broadcast_to(g, node.parents[0].shape),)


def sum_all(x) -> Tensor:
    return _build("sum_all", (_as_tensor(x),), {})


@_forward("sum_axis")
def _sum_axis_fwd(p, ctx):
    return np.sum(p[0], axis=ctx["axis"], keepdims=True)


@_rule("sum_axis")
def _sum_axis_bwd(g, node):
    return (broadcast_to(g, node.parents[0].shape),)


def sum_axis(x, axis: int) -> Tensor:
    return _build("sum_axis", (_as_tensor(x),), {"axis": axis})


@_forward("broadcast_to")
def _bcast_fwd(p, ctx):
    return np.ascontiguousarray(np.broadcast_to(p[0], ctx["shape"]))


@_rule("broadcast_to")
def _bcast_bwd(g, node):
    return (sum_to(g, node.parents[0].shape),)


def broadcast_to(x, shape) -> Tensor:
    x = _as_tensor(x)
    _broadcastable(x, Tensor(np.zeros(shape)), "broadcast_to")
    return _build("broadcast_to", (x,), {"shape": tuple(shape)})


@_forward("sum_to")
def _sum_to_fwd(p, ctx):
    x = p[0]
    shape = ctx["shape"]
    if x.shape == shape:
        return x
    padded = (1,) * (x.ndim - len(shape)) + shape
    axes = tuple(i for i in range(x.ndim) if padded[i] == 1 and x.shape[i] != 1)
    out = x.sum(axis=axes, keepdims=True) if axes else x
    return out.reshape(shape)


@_rule("sum_to")
def _sum_to_bwd(g, node):
    return (broadcast_to(g, node.parents[0].shape),)


def sum_to(x, shape) -> Tensor:
    x = _as_tensor(x)
    shape = tuple(shape)
    if x.shape == shape:
        return x
    if len(shape) > x.data.ndim:
        raise ShapeMismatchError(f"sum_to: cannot reduce {x.shape} to {shape}")
    return _build("sum_to", (x,), {"shape": shape})


@_forward("reshape")
def _reshape_fwd(p, ctx):
    return p[0].reshape(ctx["shape"])


@_rule("reshape")
def _reshape_bwd(g, node):
    return (reshape(g, node.parents[0].shape),)


def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    shape = tuple(shape)
    if int(np.prod(shape, dtype=np.int64)) != x.data.size and -1 not in shape:
        raise ShapeMismatchError(f"reshape: {x.shape} has {x.data.size} entries, target {shape}")
    return _build("reshape", (x,), {"shape": shape})


@_forward("transpose")
def _transpose_fwd(p, ctx):
    return p[0].T


@_rule("transpose")
def _transpose_bwd(g, node):
    return (transpose(g),)


def transpose(x) -> Tensor:
    x = _as_tensor(x)
    if x.data.ndim != 2:
        raise ShapeMismatchError(f"transpose: expected 2-d, got {x.shape}")
    return _build("transpose", (x,), {})


@_forward("matmul")
def _matmul_fwd(p, ctx):
    return p[0] @ p[1]


@_rule("matmul")
def _matmul_bwd(g, node):
    a, b = node.parents
    ga = matmul(g, transpose(b)) if a.requires_grad else None
    gb = matmul(transpose(a), g) if b.requires_grad else None
    return (ga, gb)


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatchError(
            f"matmul: inner dimensions disagree, {a.shape} @ {b.shape}"
        )
    return _build("matmul", (a, b), {})


# ------------------------------------------------------------- convolutions


def _conv_geometry(op, xs, ws, stride, pad):
    sh, sw = stride
    ph, pw = pad
    if xs[1] != ws[1]:
        raise ShapeMismatchError(
            f"{op}: input channels {xs[1]} != weight channels {ws[1]}"
        )
    ho = (xs[2] + 2 * ph - ws[2]) // sh + 1
    wo = (xs[3] + 2 * pw - ws[3]) // sw + 1
    if ho < 1 or wo < 1:
        raise ShapeMismatchError(
            f"{op}: kernel {ws[2]}x{ws[3]} does not fit input {xs[2]}x{xs[3]} (pad {ph},{pw})"
        )
    return ho, wo


@_forward("conv2d")
def _conv2d_fwd(p, ctx):
    x = np.ascontiguousarray(p[0])
    w = np.ascontiguousarray(p[1])
    return kernels.conv2d_forward(x, w, *ctx["stride"], *ctx["pad"])


@_rule("conv2d")
def _conv2d_bwd(g, node):
    x, w = node.parents
    stride, pad = node.ctx["stride"], node.ctx["pad"]
    gx = conv2d_dinput(g, w, stride, pad, x.shape[2:]) if x.requires_grad else None
    gw = conv2d_dweight(x, g, stride, pad, w.shape[2:]) if w.requires_grad else None
    return (gx, gw)


def conv2d(x, w, stride=(1, 1), pad=(0, 0)) -> Tensor:
    x, w = _as_tensor(x), _as_tensor(w)
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeMismatchError(f"conv2d: expected 4-d operands, got {x.shape}, {w.shape}")
    _conv_geometry("conv2d", x.shape, w.shape, stride, pad)
    return _build("conv2d", (x, w), {"stride": tuple(stride), "pad": tuple(pad)})


@_forward("conv2d_dinput")
def _conv2d_dinput_fwd(p, ctx):
    gy = np.ascontiguousarray(p[0])
    w = np.ascontiguousarray(p[1])
    h, wid = ctx["size"]
    return kernels.conv2d_dinput(gy, w, *ctx["stride"], *ctx["pad"], h, wid)


@_rule("conv2d_dinput")
def _conv2d_dinput_bwd(g, node):
    gy, w = node.parents
    stride, pad = node.ctx["stride"], node.ctx["pad"]
    ggy = conv2d(g, w, stride, pad) if gy.requires_grad else None
    gw = conv2d_dweight(g, gy, stride, pad, w.shape[2:]) if w.requires_grad else None
    return (ggy, gw)


def conv2d_dinput(gy, w, stride, pad, size) -> Tensor:
    gy, w = _as_tensor(gy), _as_tensor(w)
    return _build(
        "conv2d_dinput",
        (gy, w),
        {"stride": tuple(stride), "pad": tuple(pad), "size": tuple(size)},
    )


@_forward("conv2d_dweight")
def _conv2d_dweight_fwd(p, ctx):
    x = np.ascontiguousarray(p[0])
    gy = np.ascontiguousarray(p[1])
    kh, kw = ctx["size"]
    return kernels.conv2d_dweight(x, gy, *ctx["stride"], *ctx["pad"], kh, kw)


@_rule("conv2d_dweight")
def _conv2d_dweight_bwd(g, node):
    x, gy = node.parents
    stride, pad = node.ctx["stride"], node.ctx["pad"]
    gx = conv2d_dinput(gy, g, stride, pad, x.shape[2:]) if x.requires_grad else None
    ggy = conv2d(x, g, stride, pad) if gy.requires_grad else None
    return (gx, ggy)


def conv2d_dweight(x, gy, stride, pad, size) -> Tensor:
    x, gy = _as_tensor(x), _as_tensor(gy)
    return _build(
        "conv2d_dweight",
        (x, gy),
        {"stride": tuple(stride), "pad": tuple(pad), "size": tuple(size)},
    )


# ------------------------------------------------------------------- pooling


@_forward("pool_take")
def _pool_take_fwd(p, ctx):
    return kernels.pool_take(np.ascontiguousarray(p[0]), ctx["idx"])


@_rule("pool_take")
def _pool_take_bwd(g, node):
    x = node.parents[0]
    return (pool_scatter(g, node.ctx["idx"], x.shape[2:]),)


def pool_take(x, idx) -> Tensor:
    x = _as_tensor(x)
    return _build("pool_take", (x,), {"idx": idx})


@_forward("pool_scatter")
def _pool_scatter_fwd(p, ctx):
    h, w = ctx["size"]
    return kernels.pool_scatter(np.ascontiguousarray(p[0]), ctx["idx"], h, w)


@_rule("pool_scatter")
def _pool_scatter_bwd(g, node):
    return (pool_take(g, node.ctx["idx"]),)


def pool_scatter(g, idx, size) -> Tensor:
    g = _as_tensor(g)
    return _build("pool_scatter", (g,), {"idx": idx, "size": tuple(size)})


def maxpool2d(x, k: int, stride: int | None = None) -> Tensor:
    """Max pooling; the argmax selection is a constant of the graph."""
    x = _as_tensor(x)
    s = k if stride is None else stride
    if x.data.ndim != 4 or x.shape[2] < k or x.shape[3] < k:
        raise ShapeMismatchError(f"maxpool2d: window {k} does not fit {x.shape}")
    idx = kernels.maxpool_argmax(np.ascontiguousarray(x.data), k, s)
    return pool_take(x, idx)


@_forward("avgpool")
def _avgpool_fwd(p, ctx):
    x = p[0]
    k = ctx["k"]
    n, c, h, w = x.shape
    return x.reshape(n, c, h // k, k, w // k, k).mean(axis=(3, 5))


@_rule("avgpool")
def _avgpool_bwd(g, node):
    x = node.parents[0]
    return (avgpool_unpool(g, node.ctx["k"], x.shape[2:]),)


def avgpool2d(x, k: int) -> Tensor:
    x = _as_tensor(x)
    if x.data.ndim != 4 or x.shape[2] % k or x.shape[3] % k:
        raise ShapeMismatchError(f"avgpool2d: window {k} must tile {x.shape} exactly")
    return _build("avgpool", (x,), {"k": k})


@_forward("avgpool_unpool")
def _avgpool_unpool_fwd(p, ctx):
    k = ctx["k"]
    return np.repeat(np.repeat(p[0], k, axis=2), k, axis=3) / float(k * k)


@_rule("avgpool_unpool")
def _avgpool_unpool_bwd(g, node):
    return (avgpool2d(g, node.ctx["k"]),)


def avgpool_unpool(y, k: int, size) -> Tensor:
    y = _as_tensor(y)
    return _build("avgpool_unpool", (y,), {"k": k, "size": tuple(size)})


# ---------------------------------------------------------------------- loss


@_forward("softmax_xent")
def _softmax_xent_fwd(p, ctx):
    logits = p[0]
    onehot = ctx["onehot"]
    m = logits.max(axis=1, keepdims=True)
    z = logits - m
    logp = z - np.log(np.sum(np.exp(z), axis=1, keepdims=True))
    return np.asarray(-np.sum(onehot * logp) / logits.shape[0])


@_rule("softmax_xent")
def _softmax_xent_bwd(g, node):
    (logits,) = node.parents
    onehot = node.ctx["onehot"]
    # the detached row max only shifts the exponent; derivatives are exact
    m = Tensor(logits.data.max(axis=1, keepdims=True))
    e = exp(sub(logits, m))
    sm = mul(e, reciprocal(sum_axis(e, 1)))
    scale = mul(g, Tensor(1.0 / logits.shape[0]))
    return (mul(sub(sm, Tensor(onehot)), scale),)


def softmax_xent(logits, onehot: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy of (B,C) logits against constant one-hot rows."""
    logits = _as_tensor(logits)
    if logits.data.ndim != 2:
        raise ShapeMismatchError(f"softmax_xent: logits must be 2-d, got {logits.shape}")
    if onehot.shape != logits.shape:
        raise ShapeMismatchError(
            f"softmax_xent: labels {onehot.shape} do not match logits {logits.shape}"
        )
    return _build("softmax_xent", (logits,), {"onehot": np.asarray(onehot, dtype=np.float64)})


def flatten(x) -> Tensor:
    x = _as_tensor(x)
    return reshape(x, (x.shape[0], int(np.prod(x.shape[1:], dtype=np.int64))))


def bias_add(x, b) -> Tensor:
    """Add a per-channel bias to (B,F) or (N,C,H,W) activations."""
    x, b = _as_tensor(x), _as_tensor(b)
    if x.data.ndim == 4:
        return add(x, reshape(b, (1, b.shape[0], 1, 1)))
    return add(x, b)
