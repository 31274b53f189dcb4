"""Reverse-mode automatic differentiation over dense numpy arrays.

Each operation returns a :class:`Node` holding its value and, when any input
needs a gradient, a closure mapping the output cotangent to input cotangents.
Nodes that cannot reach a parameter carry no parents, so evaluation without
parameters is just numpy with a thin wrapper.

Shapes are explicit: elementwise binary ops require identical shapes, the only
implicit broadcast is ``scalar * tensor``, and row/column replication goes
through :func:`expand`.
"""
from __future__ import annotations

from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import ContractError

__all__ = [
    "Node", "param", "constant", "as_node", "add", "sub", "mul", "neg", "scale",
    "matmul", "tanh", "softplus", "swish", "sigmoid", "exp", "log", "square",
    "sum", "logsumexp", "concat", "slice", "reshape", "expand", "stop_gradient",
    "backward", "value_and_grad",
]


class Node:
    """A value in the computation graph.

    ``grad_blocked`` marks stop-gradient nodes: their value is kept but no
    cotangent flows to ``parents``.
    """

    __slots__ = ("value", "parents", "vjp", "requires_grad", "op", "name", "grad_blocked")
    __array_priority__ = 100

    def __init__(self, value, parents=(), vjp=None, op="const", name=None,
                 requires_grad=False, grad_blocked=False):
        self.value = value
        self.parents = parents
        self.vjp = vjp
        self.op = op
        self.name = name
        self.requires_grad = requires_grad
        self.grad_blocked = grad_blocked

    @property
    def shape(self) -> tuple:
        return self.value.shape

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Node({self.op}{label}, shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if _is_scalar(other) or (isinstance(other, Node) and other.value.ndim == 0):
            return scale(self, other)
        if self.value.ndim == 0:
            return scale(other, self)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if not _is_scalar(other):
            raise ContractError("division is only defined by a Python scalar")
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice(self, index)


def _is_scalar(x) -> bool:
    return isinstance(x, (int, float, np.floating, np.integer))


def param(value, name: str) -> Node:
    """A leaf whose gradient is requested by name in :func:`backward`."""
    return Node(np.array(value, dtype=np.float64), op="param", name=name, requires_grad=True)


def constant(value) -> Node:
    return Node(np.asarray(value, dtype=np.float64))


def as_node(x) -> Node:
    return x if isinstance(x, Node) else constant(x)


def _make(value, op: str, parents: Sequence[Node], vjp: Callable) -> Node:
    if any(p.requires_grad for p in parents):
        return Node(value, tuple(parents), vjp, op=op, requires_grad=True)
    return Node(value, op=op)


def _same_shape(op: str, a: Node, b: Node):
    if a.shape != b.shape:
        raise ContractError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _same_shape("add", a, b)
    return _make(a.value + b.value, "add", (a, b), lambda g: (g, g))


def sub(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _same_shape("sub", a, b)
    return _make(a.value - b.value, "sub", (a, b), lambda g: (g, -g))


def mul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _same_shape("mul", a, b)
    av, bv = a.value, b.value
    return _make(av * bv, "mul", (a, b), lambda g: (g * bv, g * av))


def neg(a) -> Node:
    a = as_node(a)
    return _make(-a.value, "neg", (a,), lambda g: (-g,))


def scale(a, c) -> Node:
    """``c * a`` where ``c`` is a Python scalar or a 0-d node."""
    a = as_node(a)
    if isinstance(c, Node):
        if c.value.ndim != 0:
            raise ContractError(f"scale: factor must be a scalar, got shape {c.shape}")
        av, cv = a.value, c.value
        return _make(cv * av, "scale", (a, c), lambda g: (g * cv, np.sum(g * av)))
    c = float(c)
    return _make(c * a.value, "scale", (a,), lambda g: (c * g,))


def matmul(a, b) -> Node:
    """Matrix product of 2-d operands or batched product of 3-d operands.

    Batched operands must share the leading dimension exactly.
    """
    a, b = as_node(a), as_node(b)
    av, bv = a.value, b.value
    ok = av.ndim == bv.ndim and av.ndim in (2, 3) and av.shape[-1] == bv.shape[-2]
    if ok and av.ndim == 3:
        ok = av.shape[0] == bv.shape[0]
    if not ok:
        raise ContractError(f"matmul: incompatible shapes {av.shape} and {bv.shape}")

    def vjp(g):
        return g @ np.swapaxes(bv, -1, -2), np.swapaxes(av, -1, -2) @ g

    return _make(av @ bv, "matmul", (a, b), vjp)


def tanh(a) -> Node:
    a = as_node(a)
    y = np.tanh(a.value)
    return _make(y, "tanh", (a,), lambda g: (g * (1.0 - y * y),))


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a) -> Node:
    a = as_node(a)
    y = _sigmoid(a.value)
    return _make(y, "sigmoid", (a,), lambda g: (g * y * (1.0 - y),))


def softplus(a) -> Node:
    a = as_node(a)
    x = a.value
    return _make(np.logaddexp(0.0, x), "softplus", (a,), lambda g: (g * _sigmoid(x),))


def swish(a) -> Node:
    a = as_node(a)
    x = a.value
    s = _sigmoid(x)
    return _make(x * s, "swish", (a,), lambda g: (g * (s + x * s * (1.0 - s)),))


def exp(a) -> Node:
    a = as_node(a)
    y = np.exp(a.value)
    return _make(y, "exp", (a,), lambda g: (g * y,))


def log(a) -> Node:
    a = as_node(a)
    x = a.value
    return _make(np.log(x), "log", (a,), lambda g: (g / x,))


def square(a) -> Node:
    a = as_node(a)
    x = a.value
    return _make(x * x, "square", (a,), lambda g: (2.0 * x * g,))


def sum(a, axis: int | None = None) -> Node:  # noqa: A001 - mirrors numpy
    a = as_node(a)
    shape = a.shape
    if axis is None:
        return _make(np.sum(a.value), "sum", (a,), lambda g: (np.full(shape, g),))
    axis = axis % len(shape)

    def vjp(g):
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _make(np.sum(a.value, axis=axis), "sum", (a,), vjp)


def logsumexp(a, axis: int = -1) -> Node:
    a = as_node(a)
    x = a.value
    m = np.max(x, axis=axis, keepdims=True)
    e = np.exp(x - m)
    s = np.sum(e, axis=axis, keepdims=True)
    y = np.squeeze(m + np.log(s), axis=axis)
    p = e / s
    return _make(y, "logsumexp", (a,), lambda g: (np.expand_dims(g, axis) * p,))


def concat(nodes: Sequence, axis: int = -1) -> Node:
    nodes = [as_node(n) for n in nodes]
    ndim = nodes[0].value.ndim
    axis = axis % ndim
    for n in nodes[1:]:
        other = [d for i, d in enumerate(n.shape) if i != axis]
        first = [d for i, d in enumerate(nodes[0].shape) if i != axis]
        if n.value.ndim != ndim or other != first:
            raise ContractError(f"concat: incompatible shapes {nodes[0].shape} and {n.shape}")
    sizes = np.cumsum([n.shape[axis] for n in nodes])[:-1]
    return _make(np.concatenate([n.value for n in nodes], axis=axis), "concat", nodes,
                 lambda g: tuple(np.split(g, sizes, axis=axis)))


def slice(a, index) -> Node:  # noqa: A001 - graph op, not the builtin
    a = as_node(a)
    shape = a.shape

    def vjp(g):
        out = np.zeros(shape)
        out[index] = g
        return (out,)

    return _make(a.value[index], "slice", (a,), vjp)


def reshape(a, shape) -> Node:
    a = as_node(a)
    old = a.shape
    try:
        y = a.value.reshape(shape)
    except ValueError:
        raise ContractError(f"reshape: cannot view {old} as {tuple(shape)}") from None
    return _make(y, "reshape", (a,), lambda g: (g.reshape(old),))


def expand(a, axis: int, n: int) -> Node:
    """Insert a new axis of length ``n`` by replication (explicit broadcast)."""
    a = as_node(a)
    x = np.expand_dims(a.value, axis)
    y = np.repeat(x, n, axis=axis)
    ax = axis % y.ndim
    return _make(y, "expand", (a,), lambda g: (np.sum(g, axis=ax),))


def stop_gradient(a) -> Node:
    """Identity on values; contributes no gradient to its input."""
    a = as_node(a)
    return Node(a.value, (a,), None, op="stop_gradient", grad_blocked=True)


def _toposort(root: Node) -> list[Node]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        if node.requires_grad and not node.grad_blocked:
            for p in node.parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
    return order


def backward(root: Node, wrt: Iterable[Node] | Mapping[str, Node],
             seed: float | np.ndarray = 1.0) -> dict[str, np.ndarray]:
    """Gradients of the scalar ``root`` with respect to the given leaves.

    ``wrt`` may be a mapping name -> node or an iterable of named nodes.
    Leaves not reached by the graph get zero gradients.  A non-scalar root is
    accepted only with an explicit cotangent ``seed`` of matching shape (used
    by vector-Jacobian products in the adjoint sweep).
    """
    if isinstance(wrt, Mapping):
        targets = dict(wrt)
    else:
        targets = {n.name: n for n in wrt}
    if np.ndim(seed) == 0 and root.value.size != 1:
        raise ContractError(f"backward: root must be scalar, got shape {root.shape}")
    cot = {id(root): np.broadcast_to(np.asarray(seed, dtype=np.float64), root.shape).copy()}
    for node in reversed(_toposort(root)):
        g = cot.get(id(node))
        if g is None or node.vjp is None or node.grad_blocked:
            continue
        for p, gp in zip(node.parents, node.vjp(g)):
            if not p.requires_grad:
                continue
            prev = cot.get(id(p))
            cot[id(p)] = gp if prev is None else prev + gp
    out = {}
    for name, node in targets.items():
        g = cot.get(id(node))
        out[name] = np.zeros(node.shape) if g is None else np.array(g, dtype=np.float64)
    return out


def value_and_grad(fn: Callable[..., Node], params: Mapping[str, np.ndarray]):
    """Evaluate ``fn(**nodes)`` and differentiate it with respect to ``params``."""
    nodes = {k: param(v, k) for k, v in params.items()}
    out = fn(**nodes)
    return float(out.value), backward(out, nodes)
