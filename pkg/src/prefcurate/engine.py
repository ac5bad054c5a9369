"""Reverse-mode automatic differentiation over numpy arrays.

The design constraint that shapes everything here: backward passes are built
out of the same primitive operations as forward passes. Each primitive's
vector-Jacobian product returns a :class:`Tensor` computed with other
primitives, so the output of :func:`grad` is itself differentiable. That is
what makes exact Hessian-vector products possible by double backprop:
differentiate ``dot(grad(L), v)`` once more and the second sweep walks the
graph built by the first.

Conventions:

* all data is float64; inputs are coerced on construction,
* graphs are directed acyclic, built eagerly during the forward pass,
* a tensor participates in the graph only if ``requires_grad`` is set on it
  or on one of its ancestors,
* :func:`no_grad` suppresses graph construction (and is what evaluation-only
  code paths use), with per-thread effect.

Only the operations this package needs are implemented. ``matmul`` requires
both operands to have at least two dimensions; use :func:`matvec` or
:func:`dot` for the lower-rank contractions.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager

import numpy as np

__all__ = [
    "Tensor",
    "no_grad",
    "as_tensor",
    "grad",
    "add",
    "sub",
    "neg",
    "mul",
    "div",
    "power",
    "matmul",
    "matvec",
    "dot",
    "exp",
    "log",
    "sqrt",
    "tanh",
    "sigmoid",
    "softplus",
    "softmax",
    "tensor_sum",
    "mean",
    "reshape",
    "swapaxes",
    "broadcast_to",
]

_LOCAL = threading.local()


def _grad_enabled() -> bool:
    return getattr(_LOCAL, "grad_enabled", True)


@contextmanager
def _set_grad(enabled: bool):
    previous = _grad_enabled()
    _LOCAL.grad_enabled = enabled
    try:
        yield
    finally:
        _LOCAL.grad_enabled = previous


def no_grad():
    """Context manager under which no graph edges are recorded."""
    return _set_grad(False)


class Tensor:
    """A float64 numpy array plus the edges needed for reverse-mode AD.

    ``_parents`` holds ``(parent, vjp)`` pairs where ``vjp`` maps the output
    adjoint to the parent's adjoint contribution, itself a :class:`Tensor`.
    """

    __slots__ = ("data", "requires_grad", "_parents")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad) and _grad_enabled()
        self._parents: tuple = ()

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape) -> "Tensor":
        return reshape(self, shape)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"


def as_tensor(value) -> Tensor:
    """Lift a numpy array or python scalar into a constant tensor."""
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _attach(out: Tensor, *edges) -> Tensor:
    """Record graph edges on ``out`` for the parents that require gradients."""
    if _grad_enabled():
        tracked = tuple(edge for edge in edges if edge[0].requires_grad)
        if tracked:
            out.requires_grad = True
            out._parents = tracked
    return out


def _unbroadcast(g: Tensor, shape: tuple) -> Tensor:
    """Reduce adjoint ``g`` back to ``shape`` by summing broadcast axes."""
    if g.data.shape == shape:
        return g
    extra = g.data.ndim - len(shape)
    if extra > 0:
        g = tensor_sum(g, axis=tuple(range(extra)))
    axes = tuple(
        i for i, dim in enumerate(shape) if dim == 1 and g.data.shape[i] != 1
    )
    if axes:
        g = tensor_sum(g, axis=axes, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data + b.data)
    return _attach(
        out,
        (a, lambda g: _unbroadcast(g, a.data.shape)),
        (b, lambda g: _unbroadcast(g, b.data.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data - b.data)
    return _attach(
        out,
        (a, lambda g: _unbroadcast(g, a.data.shape)),
        (b, lambda g: _unbroadcast(neg(g), b.data.shape)),
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(-a.data)
    return _attach(out, (a, lambda g: neg(g)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data * b.data)
    return _attach(
        out,
        (a, lambda g: _unbroadcast(mul(g, b), a.data.shape)),
        (b, lambda g: _unbroadcast(mul(g, a), b.data.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data / b.data)
    return _attach(
        out,
        (a, lambda g: _unbroadcast(div(g, b), a.data.shape)),
        (b, lambda g: _unbroadcast(neg(div(mul(g, out), b)), b.data.shape)),
    )


def power(a, exponent: float) -> Tensor:
    """Elementwise ``a ** exponent`` for a constant python exponent."""
    a = as_tensor(a)
    exponent = float(exponent)
    out = Tensor(a.data**exponent)
    return _attach(
        out, (a, lambda g: mul(g, mul(power(a, exponent - 1.0), exponent)))
    )


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ValueError(
            "matmul requires operands with ndim >= 2; use matvec or dot"
        )
    out = Tensor(a.data @ b.data)
    return _attach(
        out,
        (a, lambda g: _unbroadcast(matmul(g, swapaxes(b, -1, -2)), a.data.shape)),
        (b, lambda g: _unbroadcast(matmul(swapaxes(a, -1, -2), g), b.data.shape)),
    )


def matvec(m, v) -> Tensor:
    """2-d matrix times 1-d vector, returning a 1-d tensor."""
    m, v = as_tensor(m), as_tensor(v)
    if m.data.ndim != 2 or v.data.ndim != 1:
        raise ValueError("matvec expects a 2-d matrix and a 1-d vector")
    column = reshape(v, (v.data.shape[0], 1))
    return reshape(matmul(m, column), (m.data.shape[0],))


def dot(a, b) -> Tensor:
    """Full contraction of two same-shape tensors to a scalar."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.shape != b.data.shape:
        raise ValueError(f"dot shape mismatch: {a.data.shape} vs {b.data.shape}")
    return tensor_sum(mul(a, b))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.exp(a.data))
    return _attach(out, (a, lambda g: mul(g, out)))


def log(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.log(a.data))
    return _attach(out, (a, lambda g: div(g, a)))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.sqrt(a.data))
    return _attach(out, (a, lambda g: mul(g, div(0.5, out))))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.tanh(a.data))
    return _attach(out, (a, lambda g: mul(g, sub(1.0, mul(out, out)))))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    # Evaluate on the side of the exp that cannot overflow.
    out_data = np.where(
        x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x)))
    )
    out = Tensor(out_data)
    return _attach(out, (a, lambda g: mul(g, mul(out, sub(1.0, out)))))


def softplus(a) -> Tensor:
    """``log(1 + exp(a))`` with the overflow-safe forward evaluation."""
    a = as_tensor(a)
    out = Tensor(np.logaddexp(0.0, a.data))
    return _attach(out, (a, lambda g: mul(g, sigmoid(a))))


def softmax(a, axis: int = -1) -> Tensor:
    """Softmax along ``axis``; the max-shift uses detached values."""
    a = as_tensor(a)
    shift = Tensor(np.max(a.data, axis=axis, keepdims=True))
    e = exp(sub(a, shift))
    return div(e, tensor_sum(e, axis=axis, keepdims=True))


def _restored_shape(shape: tuple, axis) -> tuple:
    if axis is None:
        return (1,) * len(shape)
    axes = axis if isinstance(axis, tuple) else (axis,)
    axes = {ax % len(shape) for ax in axes}
    return tuple(1 if i in axes else dim for i, dim in enumerate(shape))


def tensor_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.sum(a.data, axis=axis, keepdims=keepdims))

    def vjp(g):
        if not keepdims:
            g = reshape(g, _restored_shape(a.data.shape, axis))
        return broadcast_to(g, a.data.shape)

    return _attach(out, (a, vjp))


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    total = tensor_sum(a, axis=axis, keepdims=keepdims)
    count = a.data.size // max(total.data.size, 1)
    return mul(total, 1.0 / count)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.reshape(a.data, shape))
    return _attach(out, (a, lambda g: reshape(g, a.data.shape)))


def swapaxes(a, axis1: int, axis2: int) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.swapaxes(a.data, axis1, axis2))
    return _attach(out, (a, lambda g: swapaxes(g, axis1, axis2)))


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.broadcast_to(a.data, shape))
    return _attach(out, (a, lambda g: _unbroadcast(g, a.data.shape)))


def _toposort(root: Tensor) -> list:
    """Nodes of the gradient-relevant subgraph, root first."""
    order: list = []
    visited: set = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent, _ in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    order.reverse()
    return order


def grad(output: Tensor, inputs, create_graph: bool = False) -> list:
    """Gradients of a scalar ``output`` with respect to each of ``inputs``.

    With ``create_graph=True`` the returned tensors carry their own graphs,
    so they can be differentiated again. Inputs that do not influence the
    output receive zero gradients of matching shape.
    """
    if output.data.size != 1:
        raise ValueError("grad expects a scalar output")
    adjoints = {id(output): Tensor(np.ones_like(output.data))}
    topo = _toposort(output) if output.requires_grad else []
    with _set_grad(create_graph):
        for node in topo:
            g = adjoints.get(id(node))
            if g is None:
                continue
            for parent, vjp in node._parents:
                contribution = vjp(g)
                previous = adjoints.get(id(parent))
                adjoints[id(parent)] = (
                    contribution if previous is None else add(previous, contribution)
                )
    results = []
    for tensor in inputs:
        g = adjoints.get(id(tensor))
        if g is None or not tensor.requires_grad:
            g = Tensor(np.zeros_like(tensor.data))
        results.append(g)
    return results
