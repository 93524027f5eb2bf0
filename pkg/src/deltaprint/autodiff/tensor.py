"""Tensor container and the reverse-mode differentiation tape.

Values are dense float64 numpy arrays in row-major order. Every
differentiable operation records an OpNode linking the output tensor to
its inputs together with a closure that maps the output gradient to the
input gradients. backward() topologically sorts the recorded nodes from
the loss and walks them once in reverse.
"""

from __future__ import annotations

from typing import Callable, Iterable, Optional, Sequence

import numpy as np


class ContractViolation(ValueError):
    """An operation was called outside its documented contract."""


class OpNode:
    """One recorded operation: inputs, producing op, and its backward map.

    backward_fn receives the gradient w.r.t. the node's output and returns
    one gradient array (or None) per input, in input order.
    """

    __slots__ = ("op", "inputs", "backward_fn")

    def __init__(self, op: str, inputs: Sequence["Tensor"],
                 backward_fn: Callable[[np.ndarray], tuple]):
        self.op = op
        self.inputs = tuple(inputs)
        self.backward_fn = backward_fn

    def __repr__(self):
        return f"OpNode({self.op}, {len(self.inputs)} inputs)"


class Tensor:
    """Dense n-dimensional float64 array with optional gradient tracking.

    Data is immutable by convention once the tensor participates in a
    graph; only the grad buffer is written to, by backward().
    """

    __slots__ = ("data", "requires_grad", "grad", "node")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.ascontiguousarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.node: Optional[OpNode] = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractViolation(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={tuple(self.shape)}{flag})"

    # Arithmetic sugar used by composite ops and tests; heavy lifting
    # lives in ops.py.
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    def __neg__(self):
        from . import ops
        return ops.mul(self, -1.0)


def register_op(op: str, inputs: Sequence[Tensor], out_data: np.ndarray,
                backward_fn: Callable[[np.ndarray], tuple]) -> Tensor:
    """Wrap a computed forward result as a graph node.

    The returned tensor requires grad iff any input does; leaf results
    skip node creation entirely so inference builds no graph.
    """
    out = Tensor(out_data)
    if any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = OpNode(op, inputs, backward_fn)
    return out


class Graph:
    """Topologically ordered op records reachable from one output tensor."""

    def __init__(self, nodes: list[OpNode]):
        self.nodes = nodes

    @classmethod
    def from_output(cls, output: Tensor) -> "Graph":
        order: list[OpNode] = []
        seen: set[int] = set()
        if output.node is None:
            return cls(order)
        # Iterative post-order DFS: children first, so `order` ends up
        # topologically sorted with the output's node last.
        stack: list[tuple[OpNode, bool]] = [(output.node, False)]
        while stack:
            node, expanded = stack.pop()
            if id(node) in seen:
                continue
            if expanded:
                seen.add(id(node))
                order.append(node)
                continue
            stack.append((node, True))
            for t in node.inputs:
                if t.node is not None and id(t.node) not in seen:
                    stack.append((t.node, False))
        return cls(order)

    def __len__(self):
        return len(self.nodes)


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into .grad of every requires_grad leaf.

    The loss must be scalar. Repeated calls without zero_grad accumulate,
    which is what the tied-decoder update relies on.
    """
    if loss.data.size != 1:
        raise ContractViolation(
            f"backward() requires a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return

    graph = Graph.from_output(loss)
    # Output-gradient buffers keyed by tensor identity; the seed is 1.
    # Buffers are never mutated in place, so a closure returning the same
    # array (or a view) for several inputs stays safe.
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}

    if loss.node is None:
        if loss.grad is None:
            loss.grad = np.zeros_like(loss.data)
        loss.grad = loss.grad + grads[id(loss)]
        return

    for node_out, node in _outputs_of(graph, loss):
        g_out = grads.pop(id(node_out), None)
        if g_out is None:
            continue
        input_grads = node.backward_fn(g_out)
        for t, g in zip(node.inputs, input_grads):
            if g is None:
                continue
            if t.node is None:
                # Leaf: accumulate into .grad if tracked.
                if t.requires_grad:
                    if t.grad is None:
                        t.grad = np.zeros_like(t.data)
                    t.grad = t.grad + g
            else:
                buf = grads.get(id(t))
                grads[id(t)] = g if buf is None else buf + g


def _outputs_of(graph: Graph, loss: Tensor) -> Iterable[tuple[Tensor, OpNode]]:
    """Pair each node with its output tensor, in reverse topological order.

    Nodes do not hold a reference to their output (the output holds the
    node), so recover the pairing from the input links.
    """
    out_of: dict[int, Tensor] = {id(loss.node): loss}
    for node in graph.nodes:
        for t in node.inputs:
            if t.node is not None:
                out_of[id(t.node)] = t
    for node in reversed(graph.nodes):
        yield out_of[id(node)], node
