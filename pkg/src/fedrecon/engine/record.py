"""Replayable recordings of engine computations."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .tensor import Tensor


@dataclass(frozen=True)
class RecordNode:
    op: str
    parents: tuple
    ctx: dict
    leaf_data: np.ndarray | None


@dataclass
class ComputationRecord:
    """Topologically ordered primitive trace ending at one root value."""

    nodes: list

    def ops_used(self) -> list:
        return [n.op for n in self.nodes if n.op != "leaf"]

    def replay(self) -> np.ndarray:
        """Re-executes every node; bit-identical to the recorded forward."""
        values: list = []
        for node in self.nodes:
            if node.op == "leaf":
                values.append(node.leaf_data)
            else:
                parent_vals = tuple(values[i] for i in node.parents)
                values.append(ops.FORWARD[node.op](parent_vals, node.ctx))
        return values[-1]


def record(root: Tensor) -> ComputationRecord:
    """Capture the full computation graph below `root` in topological order."""
    order: list = []
    seen: set = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            stack.append((p, False))
    index = {id(t): i for i, t in enumerate(order)}
    nodes = [
        RecordNode(
            op=t.op,
            parents=tuple(index[id(p)] for p in t.parents),
            ctx=t.ctx,
            leaf_data=t.data if t.op == "leaf" else None,
        )
        for t in order
    ]
    return ComputationRecord(nodes)
