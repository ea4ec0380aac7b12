"""Minimal reverse-mode automatic differentiation on float64 numpy arrays.

A :class:`Tensor` wraps an ndarray plus the operation that produced it.
Calling :func:`backward` on a scalar loss materializes ``.grad`` on every
reachable tensor that requires gradients. Everything runs in float64 so
finite-difference checks can be tight.
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """An n-d float64 array participating in a differentiation graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None, _op: str = ""):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad) or any(p.requires_grad for p in _parents)
        self._parents = _parents
        self._backward = _backward
        self._op = _op

    # -- introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def is_leaf(self) -> bool:
        return not self._parents

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        op = f" op={self._op}" if self._op else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{op})"

    # -- graph control -------------------------------------------------

    def detach(self) -> "Tensor":
        """Cut the graph: same values, no gradient flows past this point."""
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    # -- operators -----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_ensure(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_ensure(other), self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent):
        return pow_(self, exponent)

    # -- method sugar ----------------------------------------------------

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def min(self, axis=None, keepdims=False):
        return min_(self, axis=axis, keepdims=keepdims)

    def max(self, axis=None, keepdims=False):
        return max_(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 or isinstance(shape[0], int) else shape[0])

    def transpose(self, axes=None):
        return transpose(self, axes)

    @property
    def T(self):
        return transpose(self)


def _ensure(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _check_broadcast(a: Tensor, b: Tensor, op: str):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# -- elementwise binary ----------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _ensure(a), _ensure(b)
    _check_broadcast(a, b, "add")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor(a.data + b.data, _parents=(a, b), _backward=backward, _op="add")


def sub(a, b) -> Tensor:
    a, b = _ensure(a), _ensure(b)
    _check_broadcast(a, b, "sub")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor(a.data - b.data, _parents=(a, b), _backward=backward, _op="sub")


def mul(a, b) -> Tensor:
    a, b = _ensure(a), _ensure(b)
    _check_broadcast(a, b, "mul")

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor(a.data * b.data, _parents=(a, b), _backward=backward, _op="mul")


def div(a, b) -> Tensor:
    a, b = _ensure(a), _ensure(b)
    _check_broadcast(a, b, "div")

    def backward(g):
        return (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        )

    return Tensor(a.data / b.data, _parents=(a, b), _backward=backward, _op="div")


def pow_(a, exponent: float) -> Tensor:
    a = _ensure(a)
    c = float(exponent)

    def backward(g):
        return (g * c * np.power(a.data, c - 1.0),)

    return Tensor(np.power(a.data, c), _parents=(a,), _backward=backward, _op="pow")


# -- elementwise unary ------------------------------------------------------


def relu(a) -> Tensor:
    a = _ensure(a)
    mask = a.data > 0

    def backward(g):
        return (g * mask,)

    return Tensor(np.where(mask, a.data, 0.0), _parents=(a,), _backward=backward, _op="relu")


def exp(a) -> Tensor:
    a = _ensure(a)
    out = np.exp(a.data)

    def backward(g):
        return (g * out,)

    return Tensor(out, _parents=(a,), _backward=backward, _op="exp")


def log(a) -> Tensor:
    a = _ensure(a)
    if np.any(a.data <= 0.0):
        raise ValueError("log requires strictly positive inputs")

    def backward(g):
        return (g / a.data,)

    return Tensor(np.log(a.data), _parents=(a,), _backward=backward, _op="log")


def sqrt(a) -> Tensor:
    """Elementwise square root; subgradient 0 where the input is exactly 0."""
    a = _ensure(a)
    out = np.sqrt(a.data)

    def backward(g):
        safe = np.where(out > 0.0, out, 1.0)
        return (np.where(out > 0.0, g * 0.5 / safe, 0.0),)

    return Tensor(out, _parents=(a,), _backward=backward, _op="sqrt")


# -- linear algebra ---------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = _ensure(a), _ensure(b)
    if a.ndim < 1 or b.ndim < 1:
        raise ShapeError(f"matmul: operands must have rank >= 1, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeError(f"matmul: inner dimensions disagree for {a.shape} and {b.shape}")

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if b.ndim > 1 else np.multiply.outer(g, b.data)
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return Tensor(np.matmul(a.data, b.data), _parents=(a, b), _backward=backward, _op="matmul")


# -- reductions -------------------------------------------------------------


def sum_(a, axis=None, keepdims=False) -> Tensor:
    a = _ensure(a)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return Tensor(a.data.sum(axis=axis, keepdims=keepdims), _parents=(a,), _backward=backward, _op="sum")


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = _ensure(a)
    count = a.size if axis is None else a.shape[axis]

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy() / count,)

    return Tensor(a.data.mean(axis=axis, keepdims=keepdims), _parents=(a,), _backward=backward, _op="mean")


def _extremum(a, axis, keepdims, op_name, np_reduce, np_arg):
    a = _ensure(a)
    if axis is None:
        flat = np_arg(a.data)
        out = np_reduce(a.data, axis=None, keepdims=keepdims)

        def backward(g):
            gx = np.zeros(a.shape)
            gx[np.unravel_index(flat, a.shape)] = g if np.ndim(g) == 0 else g.reshape(())
            return (gx,)

        return Tensor(out, _parents=(a,), _backward=backward, _op=op_name)

    # one scan: the argmax locates the (first) extremum, take_along_axis reads it
    idx = np.expand_dims(np_arg(a.data, axis=axis), axis)
    taken = np.take_along_axis(a.data, idx, axis=axis)
    out = taken if keepdims else taken.squeeze(axis)

    def backward(g):
        gx = np.zeros(a.shape)
        np.put_along_axis(gx, idx, g if keepdims else np.expand_dims(g, axis), axis=axis)
        return (gx,)

    return Tensor(out, _parents=(a,), _backward=backward, _op=op_name)


def min_(a, axis=None, keepdims=False) -> Tensor:
    return _extremum(a, axis, keepdims, "min", np.min, np.argmin)


def max_(a, axis=None, keepdims=False) -> Tensor:
    return _extremum(a, axis, keepdims, "max", np.max, np.argmax)


def softmax(a, axis: int = -1) -> Tensor:
    a = _ensure(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - inner),)

    return Tensor(out, _parents=(a,), _backward=backward, _op="softmax")


# -- shape surgery ----------------------------------------------------------


def reshape(a, shape) -> Tensor:
    a = _ensure(a)

    def backward(g):
        return (g.reshape(a.shape),)

    return Tensor(a.data.reshape(shape), _parents=(a,), _backward=backward, _op="reshape")


def transpose(a, axes=None) -> Tensor:
    a = _ensure(a)
    inverse = None if axes is None else np.argsort(axes)

    def backward(g):
        return (g.transpose(inverse) if axes is not None else g.transpose(),)

    return Tensor(a.data.transpose(axes), _parents=(a,), _backward=backward, _op="transpose")


def broadcast_to(a, shape) -> Tensor:
    a = _ensure(a)

    def backward(g):
        return (_unbroadcast(g, a.shape),)

    return Tensor(np.broadcast_to(a.data, shape).copy(), _parents=(a,), _backward=backward, _op="broadcast")


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_ensure(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor(
        np.concatenate([t.data for t in tensors], axis=axis),
        _parents=tuple(tensors),
        _backward=backward,
        _op="concat",
    )


def gather(a, indices, axis: int = 0) -> Tensor:
    """Select slices of `a` along `axis` by integer index (repeats allowed)."""
    a = _ensure(a)
    indices = np.asarray(indices, dtype=np.intp)

    def backward(g):
        gx = np.zeros(a.shape)  # np.zeros: calloc is cheap for large buffers
        if axis == 0:
            np.add.at(gx, indices, g)
        else:
            gx_m = np.moveaxis(gx, axis, 0)
            np.add.at(gx_m, indices, np.moveaxis(g, axis, 0))
        return (gx,)

    return Tensor(np.take(a.data, indices, axis=axis), _parents=(a,), _backward=backward, _op="gather")


# -- backward engine --------------------------------------------------------


def _topo_order(root: Tensor):
    order, visited, stack = [], set(), [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad:
                stack.append((parent, False))
    return order


def backward(loss: Tensor):
    """Populate `.grad` on every tensor the scalar `loss` depends on."""
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topo_order(loss)
    loss.grad = np.ones_like(loss.data)
    # copy-on-write accumulation: a closure may hand the same array to several
    # parents, so a stored grad is only mutated in place once this pass owns it
    owned: set[int] = set()
    for node in reversed(order):
        if node._backward is None or node.grad is None:
            continue
        parent_grads = node._backward(node.grad)
        for parent, g in zip(node._parents, parent_grads):
            if g is None or not parent.requires_grad:
                continue
            if parent.grad is None:
                parent.grad = np.asarray(g, dtype=np.float64)
            elif id(parent) in owned:
                parent.grad += g
            else:
                parent.grad = parent.grad + g
                owned.add(id(parent))
        if node._parents:
            # intermediate grads are only needed while propagating
            node.grad = None
    loss.grad = np.ones_like(loss.data)
