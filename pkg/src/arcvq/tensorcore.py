"""Minimal reverse-mode differentiation over dense numpy arrays.

A :class:`Node` wraps an ``ndarray`` value together with the operation that
produced it and references to its parents.  Calling :func:`backward` on a
scalar node walks the graph in reverse topological order and accumulates
``d root / d node`` into ``node.grad`` for every node that requires a
gradient.

Scalars are represented with shape ``(1,)``; zero-dimensional arrays never
appear as node values.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import kernels
from .errors import ContractError, ShapeError

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Node:
    """A value in the computation graph.

    Attributes:
        value: the forward value (never 0-d).
        grad: accumulated gradient of the last :func:`backward` root, or None.
        op: short tag naming the producing operation ("leaf" for inputs).
        parents: nodes this one was computed from.
        requires_grad: whether gradients are tracked through this node.
        info: free-form diagnostics attached by fused operations.
    """

    __slots__ = ("value", "grad", "op", "parents", "requires_grad", "_backward", "info")

    def __init__(
        self,
        value: np.ndarray,
        op: str = "leaf",
        parents: Sequence["Node"] = (),
        backward_fn: Optional[BackwardFn] = None,
        requires_grad: bool = False,
    ):
        value = np.asarray(value)
        if value.ndim == 0:
            value = value.reshape(1)
        if any(dim < 1 for dim in value.shape):
            raise ShapeError(f"{op}: every dim must be >= 1, got {value.shape}")
        self.value = value
        self.grad: Optional[np.ndarray] = None
        self.op = op
        self.parents = tuple(parents)
        self.requires_grad = requires_grad
        self._backward = backward_fn
        self.info: dict = {}

    @property
    def shape(self) -> tuple:
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Node(op={self.op!r}, shape={self.value.shape}, requires_grad={self.requires_grad})"

    # Operator sugar keeps model code readable.
    def __add__(self, other: "Node") -> "Node":
        return add(self, other)

    def __sub__(self, other: "Node") -> "Node":
        return sub(self, other)

    def __mul__(self, other: "Node") -> "Node":
        return mul(self, other)

    def __matmul__(self, other: "Node") -> "Node":
        return matmul(self, other)


def leaf(value, requires_grad: bool = True) -> Node:
    """Wrap an array as a graph input."""
    return Node(np.asarray(value), "leaf", requires_grad=requires_grad)


def const(value) -> Node:
    return Node(np.asarray(value), "const", requires_grad=False)


def make_node(value: np.ndarray, op: str, parents: Sequence[Node], backward_fn: BackwardFn) -> Node:
    """Create an op output. Used by fused operations defined outside this module."""
    requires = any(p.requires_grad for p in parents)
    return Node(value, op, parents, backward_fn if requires else None, requires)


def _same_shape(op: str, a: Node, b: Node) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: dims {list(a.shape)} and {list(b.shape)} do not match")


def add(a: Node, b: Node) -> Node:
    _same_shape("add", a, b)
    return make_node(a.value + b.value, "add", (a, b), lambda g: (g, g))


def sub(a: Node, b: Node) -> Node:
    _same_shape("sub", a, b)
    return make_node(a.value - b.value, "sub", (a, b), lambda g: (g, -g))


def mul(a: Node, b: Node) -> Node:
    _same_shape("mul", a, b)
    av, bv = a.value, b.value
    return make_node(av * bv, "mul", (a, b), lambda g: (g * bv, g * av))


def scale(a: Node, c: float) -> Node:
    c = float(c)
    return make_node(a.value * c, "scale", (a,), lambda g: (g * c,))


def matmul(a: Node, b: Node) -> Node:
    av, bv = a.value, b.value
    if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[0]:
        raise ShapeError(f"matmul: dims {list(av.shape)} and {list(bv.shape)} are not compatible")
    return make_node(av @ bv, "matmul", (a, b), lambda g: (g @ bv.T, av.T @ g))


def add_bias(a: Node, bias: Node) -> Node:
    """Add a length-M vector to every row of an N x M matrix."""
    av, bv = a.value, bias.value
    if av.ndim != 2 or bv.ndim != 1 or av.shape[1] != bv.shape[0]:
        raise ShapeError(f"add_bias: dims {list(av.shape)} and {list(bv.shape)} are not compatible")
    return make_node(av + bv, "add_bias", (a, bias), lambda g: (g, g.sum(axis=0)))


def relu(a: Node) -> Node:
    on = a.value > 0  # subgradient at 0 is 0
    return make_node(np.where(on, a.value, 0.0).astype(a.value.dtype), "relu", (a,), lambda g: (g * on,))


def tanh(a: Node) -> Node:
    y = np.tanh(a.value)
    return make_node(y, "tanh", (a,), lambda g: (g * (1.0 - y * y),))


def square(a: Node) -> Node:
    av = a.value
    return make_node(av * av, "square", (a,), lambda g: (2.0 * av * g,))


def sqrt(a: Node) -> Node:
    if np.any(a.value < 0):
        raise ContractError("sqrt: negative input")
    y = np.sqrt(a.value)
    return make_node(y, "sqrt", (a,), lambda g: (g / (2.0 * y),))


def clamp(a: Node, lo: float, hi: float) -> Node:
    if lo > hi:
        raise ContractError(f"clamp: lo={lo} > hi={hi}")
    av = a.value
    inside = (av >= lo) & (av <= hi)
    return make_node(np.clip(av, lo, hi), "clamp", (a,), lambda g: (g * inside,))


def reshape(a: Node, dims: Sequence[int]) -> Node:
    dims = tuple(int(d) for d in dims)
    if int(np.prod(dims)) != a.value.size:
        raise ShapeError(f"reshape: cannot view dims {list(a.shape)} as {list(dims)}")
    old = a.shape
    return make_node(a.value.reshape(dims), "reshape", (a,), lambda g: (g.reshape(old),))


def transpose(a: Node) -> Node:
    if a.value.ndim != 2:
        raise ShapeError(f"transpose: expected 2-D, got dims {list(a.shape)}")
    return make_node(a.value.T.copy(), "transpose", (a,), lambda g: (g.T,))


def _reduced(value: np.ndarray) -> np.ndarray:
    value = np.asarray(value)
    return value.reshape(1) if value.ndim == 0 else value


def _reduce(a: Node, axis: Optional[int], op: str, factor: float) -> Node:
    shape = a.shape
    if axis is None:
        raw = a.value.sum() * factor
        return make_node(_reduced(raw), op, (a,), lambda g: (np.full(shape, g[0] * factor),))
    axis = axis % a.value.ndim
    raw = a.value.sum(axis=axis) * factor

    def backward(g):
        g = g.reshape(raw.shape) * factor
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return make_node(_reduced(raw), op, (a,), backward)


def sum(a: Node, axis: Optional[int] = None) -> Node:  # noqa: A001 - mirrors numpy naming
    return _reduce(a, axis, "sum", 1.0)


def mean(a: Node, axis: Optional[int] = None) -> Node:
    n = a.value.size if axis is None else a.shape[axis % a.value.ndim]
    return _reduce(a, axis, "mean", 1.0 / n)


def logsumexp(a: Node) -> Node:
    """Numerically stable log(sum(exp(.))) over the last axis."""
    av = a.value
    mx = av.max(axis=-1, keepdims=True)
    ex = np.exp(av - mx)
    tot = ex.sum(axis=-1, keepdims=True)
    raw = (mx + np.log(tot))[..., 0]
    soft = ex / tot
    return make_node(_reduced(raw), "logsumexp", (a,), lambda g: (g.reshape(raw.shape)[..., None] * soft,))


def detach(a: Node) -> Node:
    """Stop-gradient: same value, no gradient flows to ``a``."""
    return Node(a.value, "detach", (a,), None, False)


def gather_rows(table: Node, index: np.ndarray) -> Node:
    """Rows ``table[index]``; gradient is scattered back onto the table rows."""
    index = np.asarray(index, dtype=np.int64)
    tv = table.value
    if tv.ndim != 2:
        raise ShapeError(f"gather_rows: expected 2-D table, got dims {list(tv.shape)}")
    if index.ndim != 1 or (index.size and (index.min() < 0 or index.max() >= tv.shape[0])):
        raise ShapeError(f"gather_rows: index out of range for {tv.shape[0]} rows")
    n_rows = tv.shape[0]
    return make_node(tv[index], "gather_rows", (table,), lambda g: (kernels.scatter_add_rows(index, g, n_rows),))


def quantize_ste(z: Node, q_values: np.ndarray) -> Node:
    """Straight-through quantization: forward ``q_values``, identity backward to ``z``."""
    q_values = np.asarray(q_values)
    if q_values.shape != z.shape:
        raise ShapeError(f"quantize_ste: dims {list(z.shape)} and {list(q_values.shape)} do not match")
    return make_node(q_values.copy(), "quantize_ste", (z,), lambda g: (g,))


def _topo_order(root: Node) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Node) -> None:
    """Accumulate gradients of the scalar ``root`` into every reachable node.

    Leaf gradients accumulate across calls; intermediate gradients are reset
    on each call so repeated backward passes do not double count.
    """
    if root.shape != (1,):
        raise ContractError(f"backward: root must be a scalar with dims [1], got {list(root.shape)}")
    order = _topo_order(root)
    for node in order:
        if node._backward is not None:
            node.grad = None
    root.grad = np.ones_like(root.value) if root.grad is None else root.grad + 1.0
    for node in reversed(order):
        if node._backward is None or node.grad is None:
            continue
        for parent, pg in zip(node.parents, node._backward(node.grad)):
            if pg is None or not parent.requires_grad:
                continue
            parent.grad = pg if parent.grad is None else parent.grad + pg


@dataclass
class GradCheckReport:
    max_rel_err: float
    passed: bool
    per_input: list = field(default_factory=list)
    tol: float = 1e-6


def rel_err(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return np.abs(analytic - numeric) / denom


def grad_check(
    f: Callable[[list], Node],
    inputs: Sequence[np.ndarray],
    eps: float = 1e-6,
    tol: float = 1e-6,
    numeric_f: Optional[Callable[[list], float]] = None,
    numeric_dtype=np.float64,
) -> GradCheckReport:
    """Compare backprop gradients of ``f`` against central differences.

    ``f`` receives a list of nodes (one per input) and must return a scalar
    node.  Every coordinate of every input is perturbed by ``+-eps``.

    Args:
      numeric_f: optional independent evaluation of the same function on plain
        arrays, used for the finite differences instead of ``f``.
      numeric_dtype: dtype the perturbed inputs are cast to before evaluation;
        ``np.longdouble`` pushes rounding noise below the gradient scale.
    """
    if eps <= 0:
        raise ContractError("grad_check: eps must be positive")
    inputs = [np.array(x, dtype=np.float64) for x in inputs]
    nodes = [leaf(x.copy()) for x in inputs]
    out = f(nodes)
    if out.shape != (1,):
        raise ContractError(f"grad_check: f must return dims [1], got {list(out.shape)}")
    backward(out)

    def evaluate(arrays):
        if numeric_f is not None:
            return numeric_f(arrays)
        return f([const(a) for a in arrays]).value[0]

    errors = []
    for k, x in enumerate(inputs):
        analytic = nodes[k].grad if nodes[k].grad is not None else np.zeros_like(x)
        numeric = np.zeros_like(x)
        flat = numeric.reshape(-1)
        for idx in range(x.size):
            vals = []
            for sign in (1.0, -1.0):
                probe = [xx.astype(numeric_dtype) for xx in inputs]
                probe[k].reshape(-1)[idx] += sign * numeric_dtype(eps)
                vals.append(evaluate(probe))
            flat[idx] = float((vals[0] - vals[1]) / (2 * numeric_dtype(eps)))
        errors.append(float(rel_err(analytic, numeric).max()))
    worst = max(errors) if errors else 0.0
    return GradCheckReport(worst, worst < tol, errors, tol)
