"""Reverse-mode automatic differentiation over dense numpy arrays.

A :class:`Node` wraps an ndarray value and remembers how it was computed;
``backward`` walks the graph once in reverse topological order and
accumulates gradients additively into every ``requires_grad`` leaf.
Default precision is float32; gradient checking (``grad_check``) runs the
same graphs in float64, where central finite differences are reliable.

Nodes are immutable after construction except for gradient accumulation
during a single backward pass; distinct graphs may be evaluated in
parallel, but a given graph belongs to one execution context at a time.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np


class ShapeError(ValueError):
    """Operand shapes invalid for an op; message names the op and shapes."""


class DomainError(ValueError):
    """Input outside an op's numeric domain (e.g. log of a non-positive)."""


_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference fast path)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class Node:
    """A value in the computation graph.

    ``value`` is a contiguous float ndarray; ``grad`` is materialized
    lazily by ``backward`` with the same shape as ``value``. Internal
    nodes keep references to their parents and a closure that maps the
    incoming gradient to per-parent contributions.
    """

    __slots__ = ("value", "grad", "parents", "requires_grad", "_backward", "op")

    def __init__(self, value, requires_grad=False, parents=(), backward=None, op="leaf"):
        if type(value) is not np.ndarray:
            value = np.asarray(value)
        if value.dtype.kind != "f":
            value = value.astype(np.float32)
        self.value = value
        self.grad = None
        self.requires_grad = requires_grad
        self.parents = parents
        self._backward = backward
        self.op = op

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def __repr__(self):
        return f"Node(op={self.op}, shape={self.value.shape}, requires_grad={self.requires_grad})"

    # Arithmetic sugar; the op implementations live in gestrec.ops.
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    def __radd__(self, other):
        from . import ops
        return ops.add(other, self)

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    def __rmul__(self, other):
        from . import ops
        return ops.mul(other, self)

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)


def as_node(x, dtype=None) -> Node:
    """Wrap an array-like as a constant leaf (no gradient)."""
    if type(x) is Node:
        return x
    return Node(np.asarray(x, dtype=dtype))


def parameter(x, dtype=np.float32) -> Node:
    """Wrap an array-like as a trainable leaf (requires_grad=True)."""
    return Node(np.ascontiguousarray(np.asarray(x, dtype=dtype)), requires_grad=True)


def make_op_node(value, parents, backward, op) -> Node:
    """Internal-node constructor used by every op.

    Recording is skipped when no parent requires a gradient or grad mode
    is off, which turns inference into plain numpy evaluation.
    """
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Node(value, requires_grad=True, parents=parents, backward=backward, op=op)
    return Node(value, op=op)


def _topo_order(root: Node) -> list[Node]:
    """Reverse-postorder DFS; each node appears exactly once."""
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Node) -> dict[int, Node]:
    """Backpropagate from a scalar root.

    Accumulates ``grad`` (additively, so nodes feeding several consumers
    receive the sum of all path gradients) on every node that requires a
    gradient, and returns the ``requires_grad`` leaves keyed by ``id``.
    """
    if root.value.size != 1:
        raise ShapeError(f"backward requires a scalar root, got shape {root.value.shape}")
    order = _topo_order(root)
    leaves = {id(n): n for n in order if n.requires_grad and not n.parents}
    root.grad = np.ones_like(root.value)
    for node in reversed(order):
        if node.grad is None or node._backward is None:
            continue
        contribs = node._backward(node.grad)
        for parent, contrib in zip(node.parents, contribs):
            if contrib is None or not parent.requires_grad:
                continue
            if parent.grad is None:
                parent.grad = np.ascontiguousarray(contrib)
            else:
                parent.grad = parent.grad + contrib
    return leaves


def zero_grad(nodes) -> None:
    for n in nodes:
        n.grad = None


@dataclass
class GradCheckReport:
    max_rel_err: float
    passed: bool
    tol: float
    per_input: list[float] = field(default_factory=list)


def grad_check(f, inputs, tol=1e-4, step=None) -> GradCheckReport:
    """Compare analytic gradients of ``f`` against central differences.

    ``f`` builds a scalar graph from a list of leaf nodes; ``inputs`` are
    the leaf arrays. Per element, ``rel_err = |a - n| / max(1e-8, |a| + |n|)``
    and the check passes iff the max over all elements is below ``tol``.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    arrays = [np.asarray(x) for x in inputs]
    if any(not np.all(np.isfinite(a)) for a in arrays):
        raise DomainError("grad_check inputs must be finite")
    leaves = [parameter(a, dtype=a.dtype if np.issubdtype(a.dtype, np.floating) else np.float64)
              for a in arrays]
    out = f(leaves)
    if out.value.size != 1:
        raise ShapeError(f"grad_check expects a scalar-valued builder, got {out.value.shape}")
    backward(out)
    analytic = [np.zeros_like(l.value) if l.grad is None else l.grad.copy() for l in leaves]

    per_input = []
    max_rel = 0.0
    for idx, leaf in enumerate(leaves):
        base = leaf.value
        h = step if step is not None else (1e-5 if base.dtype == np.float64 else 1e-3)
        worst = 0.0
        flat = base.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            with no_grad():
                flat[i] = orig + h
                f_plus = float(f(leaves).value)
                flat[i] = orig - h
                f_minus = float(f(leaves).value)
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * h)
            a = float(analytic[idx].reshape(-1)[i])
            rel = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
            worst = max(worst, rel)
        per_input.append(worst)
        max_rel = max(max_rel, worst)
    return GradCheckReport(max_rel_err=max_rel, passed=max_rel < tol, tol=tol,
                           per_input=per_input)
