"""Model-facing engine operations.

A "model" here is anything exposing:
  - `layout`: tuple of LayoutEntry describing the flat parameter vector,
  - `param_values()`: the flat float64 parameter vector,
  - `loss_graph(params, inputs, labels)`: a scalar Tensor built from engine ops.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import LayoutMismatchError, ShapeMismatchError
from . import ops
from .tensor import Tensor, grad


@dataclass(frozen=True)
class LayoutEntry:
    name: str
    shape: tuple
    offset: int

    @property
    def size(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64))


@dataclass
class FlatGradient:
    """Flat parameter-gradient vector plus the layout that partitions it."""

    values: np.ndarray
    layout: tuple

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 1:
            raise LayoutMismatchError("flat gradient must be one-dimensional")
        end = 0
        for entry in self.layout:
            if entry.offset != end:
                raise LayoutMismatchError(
                    f"layout entry {entry.name!r} starts at {entry.offset}, expected {end}"
                )
            end += entry.size
        if end != self.values.size:
            raise LayoutMismatchError(
                f"layout covers {end} values, vector has {self.values.size}"
            )

    @property
    def dim(self) -> int:
        return int(self.values.size)

    def slice_of(self, entry: LayoutEntry) -> np.ndarray:
        return self.values[entry.offset : entry.offset + entry.size].reshape(entry.shape)


def one_hot(labels, num_classes: int) -> np.ndarray:
    """Accepts class indices or an already one-hot (B,C) array."""
    arr = np.asarray(labels)
    if arr.ndim == 2:
        if arr.shape[1] != num_classes:
            raise ShapeMismatchError(
                f"one-hot labels have width {arr.shape[1]}, model outputs {num_classes}"
            )
        return arr.astype(np.float64)
    if arr.ndim != 1:
        raise ShapeMismatchError(f"labels must be (B,) or (B,C), got {arr.shape}")
    if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
        raise ShapeMismatchError(
            f"label values must lie in [0, {num_classes}), got range "
            f"[{arr.min()}, {arr.max()}]"
        )
    out = np.zeros((arr.size, num_classes))
    out[np.arange(arr.size), arr.astype(np.int64)] = 1.0
    return out


def param_tensors(model) -> list:
    """Fresh differentiable leaves for each layout entry of the model."""
    flat = model.param_values()
    out = []
    for entry in model.layout:
        view = flat[entry.offset : entry.offset + entry.size].reshape(entry.shape)
        out.append(Tensor(view, requires_grad=True))
    return out


def _layouts_agree(a, b) -> bool:
    return len(a) == len(b) and all(
        x.name == y.name and tuple(x.shape) == tuple(y.shape) and x.offset == y.offset
        for x, y in zip(a, b)
    )


def forward_loss(model, inputs, labels) -> float:
    """Mean training loss of the model on one batch."""
    params = param_tensors(model)
    loss = model.loss_graph(params, Tensor(np.asarray(inputs, dtype=np.float64)), labels)
    value = float(loss.data)
    if not np.isfinite(value):
        raise ValueError("forward loss is not finite")
    return value


def param_grad(model, inputs, labels) -> FlatGradient:
    """Gradient of the mean loss with respect to the flat parameter vector."""
    params = param_tensors(model)
    loss = model.loss_graph(params, Tensor(np.asarray(inputs, dtype=np.float64)), labels)
    grads = grad(loss, params)
    values = np.concatenate([g.data.reshape(-1) for g in grads])
    return FlatGradient(values, tuple(model.layout))


def _match_graph(model, params, x, labels, target: FlatGradient):
    if not _layouts_agree(model.layout, target.layout):
        raise LayoutMismatchError("target gradient layout does not match the model layout")
    loss = model.loss_graph(params, x, labels)
    grads = grad(loss, params, create_graph=True)
    total = None
    for g, entry in zip(grads, target.layout):
        term = ops.sum_all(ops.square(ops.sub(g, Tensor(target.slice_of(entry)))))
        total = term if total is None else ops.add(total, term)
    return total


def _cosine_match_graph(model, params, x, labels, target: FlatGradient):
    """1 - cosine similarity between the induced and captured gradients."""
    if not _layouts_agree(model.layout, target.layout):
        raise LayoutMismatchError("target gradient layout does not match the model layout")
    loss = model.loss_graph(params, x, labels)
    grads = grad(loss, params, create_graph=True)
    dot = None
    sq = None
    tnorm2 = 0.0
    for g, entry in zip(grads, target.layout):
        t = target.slice_of(entry)
        d = ops.sum_all(ops.mul(g, Tensor(t)))
        s = ops.sum_all(ops.square(g))
        dot = d if dot is None else ops.add(dot, d)
        sq = s if sq is None else ops.add(sq, s)
        tnorm2 += float(np.sum(t * t))
    denom = ops.mul(ops.sqrt(sq), Tensor(np.sqrt(tnorm2)))
    return ops.sub(Tensor(1.0), ops.mul(dot, ops.reciprocal(denom)))


def match_loss_and_data_grad(
    model,
    virtual_inputs,
    virtual_labels,
    target_grad: FlatGradient,
    update_mask=None,
    loss_mode: str = "sq_euclid",
):
    """Gradient-match loss value and its gradient with respect to the pixels.

    Masked-out batch rows of the returned gradient are exactly zero.
    """
    x = Tensor(np.asarray(virtual_inputs, dtype=np.float64), requires_grad=True)
    params = param_tensors(model)
    if loss_mode == "cosine":
        match = _cosine_match_graph(model, params, x, virtual_labels, target_grad)
    else:
        match = _match_graph(model, params, x, virtual_labels, target_grad)
    dx = grad(match, [x])[0].data.copy()
    if update_mask is not None:
        mask = np.asarray(update_mask, dtype=bool)
        if mask.shape != (x.shape[0],):
            raise ShapeMismatchError(
                f"update mask shape {mask.shape} does not match batch size {x.shape[0]}"
            )
        dx[~mask] = 0.0
    return float(match.data), dx


def data_grad_of_match_loss(
    model, virtual_inputs, virtual_labels, target_grad: FlatGradient, update_mask=None
) -> Tensor:
    """d ||grad_theta L'(virtual) - target||^2 / d virtual_inputs, masked rows zeroed."""
    _, dx = match_loss_and_data_grad(
        model, virtual_inputs, virtual_labels, target_grad, update_mask
    )
    return Tensor(dx)


def _soft_xent_graph(logits, label_logits):
    """Mean cross-entropy between softmax(label_logits) and the model logits."""
    b = logits.shape[0]
    m = Tensor(logits.data.max(axis=1, keepdims=True))
    e = ops.exp(ops.sub(logits, m))
    lse = ops.add(ops.log(ops.sum_axis(e, 1)), m)
    logp = ops.sub(logits, ops.broadcast_to(lse, logits.shape))
    lm = Tensor(label_logits.data.max(axis=1, keepdims=True))
    le = ops.exp(ops.sub(label_logits, lm))
    probs = ops.mul(le, ops.reciprocal(ops.sum_axis(le, 1)))
    return ops.mul(ops.neg(ops.sum_all(ops.mul(probs, logp))), Tensor(1.0 / b))


def joint_match_loss_and_grads(model, virtual_inputs, label_logits, target_grad: FlatGradient):
    """Match-loss gradients for jointly optimized pixels and soft labels.

    Used by the label-recovery exploration mode: labels enter as free logits
    whose softmax plays the role of the one-hot targets.
    """
    if not _layouts_agree(model.layout, target_grad.layout):
        raise LayoutMismatchError("target gradient layout does not match the model layout")
    x = Tensor(np.asarray(virtual_inputs, dtype=np.float64), requires_grad=True)
    ll = Tensor(np.asarray(label_logits, dtype=np.float64), requires_grad=True)
    params = param_tensors(model)
    logits = model.forward_graph(params, x)
    loss = _soft_xent_graph(logits, ll)
    grads = grad(loss, params, create_graph=True)
    total = None
    for g, entry in zip(grads, target_grad.layout):
        term = ops.sum_all(ops.square(ops.sub(g, Tensor(target_grad.slice_of(entry)))))
        total = term if total is None else ops.add(total, term)
    dx, dll = grad(total, [x, ll])
    return float(total.data), dx.data.copy(), dll.data.copy()


def grad_check(f, at, step: float) -> float:
    """Max relative error between analytic and central-difference gradients of f."""
    if step <= 0:
        raise ValueError("step must be positive")
    base = np.asarray(at, dtype=np.float64)
    x = Tensor(base, requires_grad=True)
    out = f(x)
    if out.data.ndim != 0 or not np.isfinite(out.data):
        raise ValueError("grad_check target must produce a finite scalar")
    analytic = grad(out, [x])[0].data.reshape(-1)
    worst = 0.0
    for i in range(base.size):
        bumped = base.copy()
        bumped.flat[i] += step
        hi = float(f(Tensor(bumped)).data)
        bumped = base.copy()
        bumped.flat[i] -= step
        lo = float(f(Tensor(bumped)).data)
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise ValueError(f"non-finite evaluation while probing coordinate {i}")
        central = (hi - lo) / (2.0 * step)
        err = abs(analytic[i] - central) / max(1e-8, abs(central))
        worst = max(worst, err)
    return worst
