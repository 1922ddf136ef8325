"""Dense float64 tensors with dynamic reverse-mode differentiation.

Every differentiable primitive returns a new :class:`Tensor` that remembers its
inputs and a closure mapping the output gradient to input gradients. The graph
is rebuilt on every forward pass; :func:`backward` walks it in reverse
topological order.
"""
from __future__ import annotations

import contextlib
import math
from typing import Callable, Sequence

import numpy as np

from . import kernels


class ShapeError(ValueError):
    """Raised when a primitive receives operands of incompatible shapes."""


class NonFiniteError(FloatingPointError):
    """Raised when a primitive produces NaN or infinite values."""


_GRAD_ENABLED = True
_CHECK_FINITE = True


@contextlib.contextmanager
def no_grad():
    """Evaluate primitives without recording the graph."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """A node in the computation graph.

    ``data`` is a float64 ndarray. Leaves created with ``requires_grad=True``
    (parameters, perturbations) receive their gradient in ``grad`` after
    :func:`backward`.
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op = op
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not a supported primitive")
        return scale(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    # a single reduction propagates any NaN/Inf without allocating a mask
    if _CHECK_FINITE and not math.isfinite(np.add.reduce(data, axis=None)):
        if not np.all(np.isfinite(data)):
            raise NonFiniteError(f"{op} produced non-finite values")
    out = Tensor(data, op=op)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(op: str, a: Tensor, b: Tensor):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- primitives

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), backward, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def matmul(a, b) -> Tensor:
    """``a @ b`` for (..., n, k) @ (k, m) or matching batched (..., n, k) @ (..., k, m)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2] or (
            b.ndim > 2 and a.shape[:-2] != b.shape[:-2]):
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    if b.ndim == 2:
        k = a.shape[-1]
        a2 = a.data.reshape(-1, k)
        out = (a2 @ b.data).reshape(a.shape[:-1] + (b.shape[1],))

        def backward(g):
            g2 = g.reshape(-1, g.shape[-1])
            ga = (g2 @ b.data.T).reshape(a.shape) if a.requires_grad else None
            return ga, (a2.T @ g2 if b.requires_grad else None)

        return _make(out, (a, b), backward, "matmul")

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2) if a.requires_grad else None
        return ga, (np.swapaxes(a.data, -1, -2) @ g if b.requires_grad else None)

    return _make(a.data @ b.data, (a, b), backward, "matmul")


def linear(a, w, b) -> Tensor:
    """Fused ``a @ w + b`` for (..., k) @ (k, m) + (m,)."""
    a, w, b = as_tensor(a), as_tensor(w), as_tensor(b)
    if w.ndim != 2 or a.shape[-1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ShapeError(f"linear: incompatible shapes {a.shape}, {w.shape}, {b.shape}")
    a2 = a.data.reshape(-1, w.shape[0])
    out = a2 @ w.data
    out += b.data

    # operands that do not require grad get None; backward() never reads it
    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        ga = (g2 @ w.data.T).reshape(a.shape) if a.requires_grad else None
        gw = a2.T @ g2 if w.requires_grad else None
        return ga, gw, (g2.sum(axis=0) if b.requires_grad else None)

    return _make(out.reshape(a.shape[:-1] + (w.shape[1],)), (a, w, b), backward, "linear")


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    if a.ndim < 2:
        raise ShapeError(f"transpose: need rank >= 2, got shape {a.shape}")
    return _make(np.swapaxes(a.data, -1, -2), (a,),
                 lambda g: (np.swapaxes(g, -1, -2),), "transpose")


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {shape}") from None
    return _make(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def gather_rows(table: Tensor, ids) -> Tensor:
    """Select rows ``table[ids]`` for an integer array of any shape."""
    ids = np.asarray(ids)
    if table.ndim != 2:
        raise ShapeError(f"gather_rows: table must be 2-D, got shape {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"gather_rows: ids out of range for table with {table.shape[0]} rows")

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _make(table.data[ids], (table,), backward, "gather_rows")


def softmax(a: Tensor) -> Tensor:
    y = kernels.softmax_fwd(a.data)
    return _make(y, (a,), lambda g: (kernels.softmax_bwd(y, g),), "softmax_lastdim")


def log_softmax(a: Tensor) -> Tensor:
    y = kernels.log_softmax_fwd(a.data)
    return _make(y, (a,), lambda g: (kernels.log_softmax_bwd(y, g),), "log_softmax_lastdim")


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    return _make(a.data * pos, (a,), lambda g: (g * pos,), "relu")


def gelu(a: Tensor) -> Tensor:
    return _make(kernels.gelu_fwd(a.data), (a,),
                 lambda g: (kernels.gelu_bwd(a.data, g),), "gelu")


def layer_norm(a: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    d = a.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: input {a.shape} with gain {gamma.shape} / bias {beta.shape}")
    y, xhat, rstd = kernels.layer_norm_fwd(a.data, gamma.data, beta.data, eps)

    def backward(g):
        gx, gg, gb = kernels.layer_norm_bwd(g, xhat, rstd, gamma.data)
        return gx, gg, gb

    return _make(y, (a, gamma, beta), backward, "layer_norm_lastdim")


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    out = a.data.mean(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, a.shape).copy(),)

    return _make(out, (a,), backward, "mean")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError("concat: incompatible shapes "
                         + ", ".join(str(t.shape) for t in tensors)) from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, tensors, backward, "concat")


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return _make(y, (a,), lambda g: (g * y,), "exp")


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def clamp_min(a: Tensor, floor: float) -> Tensor:
    keep = a.data >= floor
    return _make(np.where(keep, a.data, floor), (a,), lambda g: (g * keep,), "clamp_min")


PRIMITIVES = {
    "matmul": matmul, "add": add, "mul": mul, "gather_rows": gather_rows,
    "softmax_lastdim": softmax, "log_softmax_lastdim": log_softmax,
    "relu": relu, "gelu": gelu, "layer_norm_lastdim": layer_norm,
    "mean": mean, "sum": sum, "concat": concat,
}


def primitive(op_kind: str, *inputs, **kwargs) -> Tensor:
    """Dispatch a primitive by name."""
    try:
        fn = PRIMITIVES[op_kind]
    except KeyError:
        raise ValueError(f"unknown primitive {op_kind!r}") from None
    if op_kind == "concat":
        return fn(inputs, **kwargs)
    return fn(*inputs, **kwargs)


# ---------------------------------------------------------------- backward

class GraphCycleError(RuntimeError):
    pass


def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    state: dict[int, int] = {}  # 1 = on stack, 2 = done
    stack = [(root, iter(root._parents))]
    state[id(root)] = 1
    while stack:
        node, it = stack[-1]
        for parent in it:
            if not parent.requires_grad:
                continue
            s = state.get(id(parent))
            if s == 1:
                raise GraphCycleError("cycle detected in computation graph")
            if s is None:
                state[id(parent)] = 1
                stack.append((parent, iter(parent._parents)))
                break
        else:
            stack.pop()
            state[id(node)] = 2
            order.append(node)
    return order


def backward(loss: Tensor, accumulate: bool = True) -> dict[Tensor, np.ndarray]:
    """Reverse-mode sweep from a scalar ``loss``.

    Returns a map from every reached tensor to d(loss)/d(tensor). Leaves that
    require grad additionally get the gradient added to ``.grad`` when
    ``accumulate`` is set.
    """
    if loss.data.size != 1 or loss.ndim != 0:
        raise ShapeError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return {}
    order = _topological(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    result: dict[Tensor, np.ndarray] = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        result[node] = g
        if node.is_leaf:
            if accumulate:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return result
