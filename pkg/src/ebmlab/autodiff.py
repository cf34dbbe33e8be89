"""Reverse-mode autodiff on a small fixed primitive set.

Gradients are built as graph nodes themselves, so differentiating a
gradient expression (needed for Hessian-vector quadratic forms that stay
differentiable w.r.t. parameters) works to any depth. Everything is
float64; adding a primitive requires a derivative rule built from
existing primitives plus a finite-difference test.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


class AutodiffError(Exception):
    pass


class UnsupportedOrderError(AutodiffError):
    """Raised when a trace recorded at depth 1 is asked for depth 2."""


class Node:
    """One value in the computation graph.

    ``parents`` is empty for leaves and constants; ``vjp`` maps an
    adjoint node to per-parent adjoint contributions (as nodes, so the
    result is itself differentiable).
    """

    __slots__ = ("value", "parents", "vjp")

    def __init__(self, value, parents=(), vjp=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents: tuple[Node, ...] = tuple(parents)
        self.vjp: Callable[[Node], tuple[Node, ...]] | None = vjp

    @property
    def shape(self):
        return self.value.shape

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __neg__(self):
        return neg(self)

    def __sub__(self, other):
        return add(self, neg(as_node(other)))

    def __rsub__(self, other):
        return add(as_node(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return mul(self, power(as_node(other), -1.0))

    def __rtruediv__(self, other):
        return mul(as_node(other), power(self, -1.0))

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Node(shape={self.value.shape})"


def as_node(x) -> Node:
    if isinstance(x, Node):
        return x
    return Node(x)


def leaf(value) -> Node:
    """A differentiation target (parameter or input)."""
    return Node(value)


constant = as_node


def _sum_to(g: Node, shape: tuple[int, ...]) -> Node:
    """Reduce a broadcasted adjoint back to ``shape``."""
    if g.value.shape == shape:
        return g
    extra = g.value.ndim - len(shape)
    if extra > 0:
        g = reduce_sum(g, axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.value.shape[i] != 1)
    if axes:
        g = reduce_sum(g, axis=axes, keepdims=True)
    if g.value.shape != shape:
        g = reshape(g, shape)
    return g


def add(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    out = Node(a.value + b.value, (a, b))
    out.vjp = lambda g: (_sum_to(g, a.value.shape), _sum_to(g, b.value.shape))
    return out


def neg(a) -> Node:
    a = as_node(a)
    out = Node(-a.value, (a,))
    out.vjp = lambda g: (neg(g),)
    return out


def mul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    out = Node(a.value * b.value, (a, b))
    out.vjp = lambda g: (_sum_to(mul(g, b), a.value.shape), _sum_to(mul(g, a), b.value.shape))
    return out


def matmul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    if a.value.ndim != 2 or b.value.ndim != 2:
        raise AutodiffError("matmul primitive is 2-D only")
    out = Node(a.value @ b.value, (a, b))
    out.vjp = lambda g: (matmul(g, transpose(b)), matmul(transpose(a), g))
    return out


def transpose(a) -> Node:
    a = as_node(a)
    out = Node(a.value.T, (a,))
    out.vjp = lambda g: (transpose(g),)
    return out


def reshape(a, shape) -> Node:
    a = as_node(a)
    orig = a.value.shape
    out = Node(a.value.reshape(shape), (a,))
    out.vjp = lambda g: (reshape(g, orig),)
    return out


def broadcast_to(a, shape) -> Node:
    a = as_node(a)
    orig = a.value.shape
    out = Node(np.broadcast_to(a.value, shape), (a,))
    out.vjp = lambda g: (_sum_to(g, orig),)
    return out


def reduce_sum(a, axis=None, keepdims=False) -> Node:
    a = as_node(a)
    orig = a.value.shape
    out = Node(a.value.sum(axis=axis, keepdims=keepdims), (a,))

    def vjp(g):
        gg = g
        if not keepdims and axis is not None:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            kshape = list(orig)
            for ax in axes:
                kshape[ax] = 1
            gg = reshape(gg, tuple(kshape))
        elif not keepdims and axis is None:
            gg = reshape(gg, (1,) * len(orig)) if orig else gg
        return (broadcast_to(gg, orig),)

    out.vjp = vjp
    return out


def mean(a, axis=None, keepdims=False) -> Node:
    a = as_node(a)
    n = a.value.size if axis is None else np.prod(
        [a.value.shape[ax] for ax in ((axis,) if isinstance(axis, int) else axis)]
    )
    return mul(reduce_sum(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


def exp(a) -> Node:
    a = as_node(a)
    out = Node(np.exp(a.value), (a,))
    out.vjp = lambda g: (mul(g, out),)
    return out


def log(a) -> Node:
    a = as_node(a)
    out = Node(np.log(a.value), (a,))
    out.vjp = lambda g: (mul(g, power(a, -1.0)),)
    return out


def power(a, p: float) -> Node:
    a = as_node(a)
    out = Node(np.power(a.value, p), (a,))
    out.vjp = lambda g: (mul(g, mul(power(a, p - 1.0), p)),)
    return out


def sqrt(a) -> Node:
    return power(a, 0.5)


def square(a) -> Node:
    a = as_node(a)
    return mul(a, a)


def relu(a) -> Node:
    a = as_node(a)
    mask = (a.value > 0).astype(np.float64)
    out = Node(a.value * mask, (a,))
    out.vjp = lambda g: (mul(g, mask),)
    return out


def leaky_relu(a, slope: float = 0.2) -> Node:
    a = as_node(a)
    factor = np.where(a.value > 0, 1.0, slope)
    out = Node(a.value * factor, (a,))
    out.vjp = lambda g: (mul(g, factor),)
    return out


def sigmoid(a) -> Node:
    a = as_node(a)
    out = Node(1.0 / (1.0 + np.exp(-a.value)), (a,))
    out.vjp = lambda g: (mul(g, mul(out, add(1.0, neg(out)))),)
    return out


def softplus(a) -> Node:
    a = as_node(a)
    v = a.value
    out = Node(np.maximum(v, 0.0) + np.log1p(np.exp(-np.abs(v))), (a,))
    out.vjp = lambda g: (mul(g, sigmoid(a)),)
    return out


def logsumexp(a, axis: int = -1, keepdims: bool = False) -> Node:
    """Max-shifted logsumexp; never overflows on finite input."""
    a = as_node(a)
    m = np.max(a.value, axis=axis, keepdims=True)
    val = np.log(np.sum(np.exp(a.value - m), axis=axis, keepdims=True)) + m
    if not keepdims:
        val = np.squeeze(val, axis=axis)
    out = Node(val, (a,))

    def vjp(g):
        lse_kd = out if keepdims else reshape(out, m.shape)
        soft = exp(add(a, neg(broadcast_to(lse_kd, a.value.shape))))
        g_kd = g if keepdims else reshape(g, m.shape)
        return (mul(broadcast_to(g_kd, a.value.shape), soft),)

    out.vjp = vjp
    return out


def _toposort(output: Node) -> list[Node]:
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(output, False)]
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


def grad(output: Node, leaves: Sequence[Node]) -> list[Node]:
    """Adjoints of a scalar ``output`` w.r.t. each leaf, as graph nodes.

    The returned nodes can be differentiated again. Leaves the output
    does not depend on get zero adjoints (constant functions have zero
    gradient).
    """
    if output.value.ndim != 0 and output.value.size != 1:
        raise AutodiffError(f"grad requires a scalar output, got shape {output.value.shape}")
    order = _toposort(output)
    adjoint: dict[int, Node] = {id(output): constant(np.ones_like(output.value))}
    for node in reversed(order):
        g = adjoint.get(id(node))
        if g is None or node.vjp is None:
            continue
        for parent, contrib in zip(node.parents, node.vjp(g)):
            prev = adjoint.get(id(parent))
            adjoint[id(parent)] = contrib if prev is None else add(prev, contrib)
    out = []
    for lf in leaves:
        g = adjoint.get(id(lf))
        out.append(g if g is not None else constant(np.zeros_like(lf.value)))
    return out


class Trace:
    """A recorded scalar computation with named leaves.

    ``order`` declares the supported derivative depth; quadratic-form
    helpers refuse depth-1 traces up front instead of failing deep in a
    second backward pass.
    """

    def __init__(self, output: Node, leaves: dict[str, Node], order: int = 2):
        if order not in (1, 2):
            raise AutodiffError("trace order must be 1 or 2")
        self.output = output
        self.leaves = dict(leaves)
        self.order = order


def grad_wrt(trace: Trace, names: Sequence[str] | None = None) -> dict[str, np.ndarray]:
    """Gradient values of the trace output for each named leaf."""
    names = list(trace.leaves) if names is None else list(names)
    missing = [n for n in names if n not in trace.leaves]
    if missing:
        raise AutodiffError(f"leaves not in trace: {missing}")
    nodes = [trace.leaves[n] for n in names]
    return {n: g.value for n, g in zip(names, grad(trace.output, nodes))}


def input_hvp_form(energy: Callable[[Node], Node], x: Node, v, *, order: int = 2) -> Node:
    """Quadratic form v^T (d s / d x) v with s = -dE/dx, as a graph node.

    ``x`` may be a batch (N, D); the result is then length N. The node
    stays differentiable w.r.t. any parameter leaves used inside
    ``energy``.
    """
    if order < 2:
        raise UnsupportedOrderError("Hessian-vector forms need a depth-2 trace")
    v = as_node(v)
    if v.value.shape != x.value.shape:
        raise AutodiffError("projection vector must match the input shape")
    e = energy(x)
    e_total = reduce_sum(e) if e.value.ndim else e
    (gx,) = grad(e_total, [x])  # rows are per-sample dE/dx
    gv = reduce_sum(mul(gx, v))
    (hv,) = grad(gv, [x])
    axis = 1 if x.value.ndim == 2 else None
    return neg(reduce_sum(mul(hv, v), axis=axis))


def check_gradient(f: Callable[[np.ndarray], float], point, step: float = 1e-4):
    """Central-difference check; returns (max relative error, per-coord table)."""
    if step <= 0:
        raise AutodiffError("step must be positive")
    point = np.asarray(point, dtype=np.float64)
    x = leaf(point)
    out = f(x)
    if not isinstance(out, Node):
        raise AutodiffError("f must build a graph node from its Node argument")
    (g,) = grad(out, [x])
    analytic = g.value
    flat = point.ravel()
    numeric = np.zeros_like(flat)
    for i in range(flat.size):
        hi, lo = flat.copy(), flat.copy()
        hi[i] += step
        lo[i] -= step
        f_hi = f(constant(hi.reshape(point.shape))).value
        f_lo = f(constant(lo.reshape(point.shape))).value
        if not (np.isfinite(f_hi) and np.isfinite(f_lo)):
            raise AutodiffError(f"non-finite evaluation at coordinate {i}")
        numeric[i] = (f_hi - f_lo) / (2.0 * step)
    numeric = numeric.reshape(point.shape)
    denom = np.maximum(np.abs(analytic), np.abs(numeric))
    rel = np.abs(analytic - numeric) / np.where(denom > 1e-8, denom, 1.0)
    return float(rel.max()), rel
