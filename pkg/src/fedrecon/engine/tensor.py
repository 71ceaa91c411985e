"""Graph-recording tensors and reverse-mode differentiation.

Every operation in `ops` builds a node holding its float64 value, its parent
nodes, the op name, and enough context to re-run the forward kernel. Backward
rules (registered in `ops`) emit their results *through the same ops*, so the
gradient of a gradient is available by running `grad` twice: the first pass
records a differentiable graph of the parameter gradient, the second pass
differentiates that recording. Values are immutable after construction and
`grad` touches no global state, so concurrent calls from multiple threads are
safe.
"""
from __future__ import annotations

import itertools

import numpy as np

from ..errors import ShapeMismatchError

_ids = itertools.count()


class Tensor:
    """Dense float64 array plus its position in the recorded graph."""

    __slots__ = ("data", "requires_grad", "op", "parents", "ctx", "tid")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.size and not np.all(np.isfinite(arr)):
            raise ValueError("tensor initialized with non-finite values")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.op = "leaf"
        self.parents: tuple = ()
        self.ctx: dict = {}
        self.tid = next(_ids)

    @classmethod
    def _from_op(cls, data, op: str, parents: tuple, ctx: dict) -> "Tensor":
        t = cls.__new__(cls)
        t.data = data
        t.requires_grad = any(p.requires_grad for p in parents)
        t.op = op
        t.parents = parents
        t.ctx = ctx
        t.tid = next(_ids)
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return np.array(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        grad = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(op={self.op!r}, shape={self.data.shape}{grad})"


def _check_scalar(t: Tensor) -> None:
    if t.data.ndim != 0:
        raise ShapeMismatchError(
            f"grad root must be a scalar, got shape {t.data.shape}"
        )


def _reach_set(root: Tensor, targets: list[Tensor]) -> set[int]:
    """ids of nodes on some path from `root` down to a target (grad pruning)."""
    target_ids = {id(t) for t in targets}
    needed: set[int] = set()
    state: dict[int, bool] = {}
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        nid = id(node)
        if expanded:
            hit = nid in target_ids or any(id(p) in needed for p in node.parents)
            state[nid] = hit
            if hit:
                needed.add(nid)
            continue
        if nid in state:
            continue
        state[nid] = False
        stack.append((node, True))
        if node.requires_grad:
            for p in node.parents:
                stack.append((p, False))
    return needed


def _topo(root: Tensor, needed: set[int]) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        nid = id(node)
        if expanded:
            order.append(node)
            continue
        if nid in seen or nid not in needed:
            continue
        seen.add(nid)
        stack.append((node, True))
        for p in node.parents:
            stack.append((p, False))
    return order


def grad(output: Tensor, wrt: list[Tensor], create_graph: bool = False) -> list[Tensor]:
    """Gradients of a scalar `output` with respect to each tensor in `wrt`.

    With create_graph=True the returned tensors stay wired into the graph and
    can themselves be differentiated.
    """
    from . import ops  # deferred: ops imports Tensor

    _check_scalar(output)
    needed = _reach_set(output, wrt)
    if id(output) not in needed:
        zero = [Tensor(np.zeros_like(w.data)) for w in wrt]
        return zero
    order = _topo(output, needed)
    grads: dict[int, Tensor] = {id(output): Tensor(np.ones(()))}
    for node in reversed(order):
        g = grads.get(id(node))
        if g is None or node.op == "leaf":
            continue
        rule = ops.RULES[node.op]
        parent_grads = rule(g, node)
        for parent, pg in zip(node.parents, parent_grads):
            if pg is None or id(parent) not in needed:
                continue
            held = grads.get(id(parent))
            grads[id(parent)] = pg if held is None else ops.add(held, pg)
    # wrt entries may be shared objects; read leftover accumulations
    out: list[Tensor] = []
    for w in wrt:
        g = grads.get(id(w))
        if g is None:
            g = Tensor(np.zeros_like(w.data))
        out.append(g if create_graph else g.detach())
    return out
