"""Dense float64 tensors with reverse-mode automatic differentiation.

Every tensor wraps a row-major numpy array (the flat ``values`` plus a
``shape``). Operations record their parents and a vector-Jacobian closure;
``Tensor.backward`` walks the recorded graph once in reverse topological order,
sums gradients into leaves, and then releases the graph so it cannot be
replayed.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

from .errors import DomainError, GraphError, ShapeError

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)

BackwardFn = Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op", "_released")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        _check_extents(arr.shape)
        arr.flags.writeable = False
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self._op = ""
        self._released = False

    @classmethod
    def _wrap(cls, arr: np.ndarray, parents: tuple[Tensor, ...] = (), backward: BackwardFn | None = None,
              op: str = "") -> Tensor:
        out = cls.__new__(cls)
        arr = np.asarray(arr, dtype=np.float64)
        _check_extents(arr.shape)
        arr.flags.writeable = False
        out.data = arr
        out.grad = None
        out.requires_grad = any(p.requires_grad for p in parents)
        out._parents = parents if out.requires_grad else ()
        out._backward = backward if out.requires_grad else None
        out._op = op
        out._released = False
        return out

    # -- basic properties -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def values(self) -> np.ndarray:
        """Flat row-major view of the data."""
        return self.data.reshape(-1)

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return not self._parents and not self._released

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> Tensor:
        return Tensor._wrap(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- autograd ---------------------------------------------------------

    def backward(self) -> None:
        """Back-propagate from this scalar; populates ``grad`` on every leaf."""
        if self.data.size != 1:
            raise GraphError(f"backward() needs a scalar seed, got shape {self.shape}")
        if not self.requires_grad:
            raise GraphError("backward() called on a tensor that does not require grad")
        order = _topological_order(self)
        pending: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if not node._parents:
                node.grad = np.array(g) if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                pending[key] = pg if key not in pending else pending[key] + pg
            node._parents = ()
            node._backward = None
            node._released = True

    def zero_grad(self) -> None:
        self.grad = None

    # -- operator sugar ---------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    @property
    def T(self) -> Tensor:
        return transpose(self)

    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def exp(self) -> Tensor:
        return exp(self)

    def log(self) -> Tensor:
        return log(self)


def _check_extents(shape: tuple[int, ...]) -> None:
    if any(d < 1 for d in shape):
        raise ShapeError(f"tensor extents must all be >= 1, got shape {shape}")


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        if node._released:
            raise GraphError("graph was already released by an earlier backward(); rebuild it")
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


def zero_grad(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor._wrap(np.asarray(x, dtype=np.float64))


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# -- elementwise arithmetic -------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)

    return Tensor._wrap(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)

    return Tensor._wrap(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)

    return Tensor._wrap(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        ga = g / b.data
        return unbroadcast(ga, a.shape), unbroadcast(-ga * a.data / b.data, b.shape)

    return Tensor._wrap(a.data / b.data, (a, b), backward, "div")


def power(a: Tensor, exponent: float) -> Tensor:
    exponent = float(exponent)

    def backward(g):
        return (g * exponent * a.data ** (exponent - 1.0),)

    return Tensor._wrap(a.data ** exponent, (a,), backward, "pow")


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def backward(g):
        return (g * out_data,)

    return Tensor._wrap(out_data, (a,), backward, "exp")


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise DomainError("log of a non-positive value")

    def backward(g):
        return (g / a.data,)

    return Tensor._wrap(np.log(a.data), (a,), backward, "log")


def sqrt(a: Tensor) -> Tensor:
    if np.any(a.data < 0):
        raise DomainError("sqrt of a negative value")
    out_data = np.sqrt(a.data)

    def backward(g):
        return (g * 0.5 / out_data,)

    return Tensor._wrap(out_data, (a,), backward, "sqrt")


def gelu(a: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    cdf = 0.5 * (1.0 + erf(a.data / _SQRT2))

    def backward(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * a.data * a.data)
        return (g * (cdf + a.data * pdf),)

    return Tensor._wrap(a.data * cdf, (a,), backward, "gelu")


def clamp_min(a: Tensor, floor: float) -> Tensor:
    """``max(a, floor)``; no gradient flows where the floor is active."""
    active = a.data > floor

    def backward(g):
        return (np.where(active, g, 0.0),)

    return Tensor._wrap(np.where(active, a.data, floor), (a,), backward, "clamp_min")


# -- shape manipulation -----------------------------------------------------

def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    def backward(g):
        return (g.reshape(a.shape),)

    return Tensor._wrap(a.data.reshape(shape).copy(), (a,), backward, "reshape")


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError(f"transpose expects a 2-D tensor, got shape {a.shape}")

    def backward(g):
        return (g.T,)

    return Tensor._wrap(np.ascontiguousarray(a.data.T), (a,), backward, "transpose")


def take(a: Tensor, index) -> Tensor:
    """Indexing (slices or integer arrays); gradients scatter-add back."""
    out_data = np.array(a.data[index])

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return Tensor._wrap(out_data, (a,), backward, "take")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor._wrap(out_data, tensors, backward, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise ShapeError(f"stack needs equal shapes, got {sorted(shapes)}")
    out_data = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return Tensor._wrap(out_data, tensors, backward, "stack")


# -- reductions -------------------------------------------------------------

def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out_data = np.sum(a.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return Tensor._wrap(out_data, (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def sum_points(a: Tensor) -> Tensor:
    """Sum over axis 0 in a canonical order.

    Each column is sorted before summation, so the result is bit-identical
    under any permutation of the rows.
    """
    out_data = np.sort(a.data, axis=0).sum(axis=0)

    def backward(g):
        return (np.broadcast_to(g, a.shape).copy(),)

    return Tensor._wrap(out_data, (a,), backward, "sum_points")


# -- linear algebra ---------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D product. The forward uses einsum rather than BLAS: BLAS picks
    different kernels for tail rows and for single-column products, so a row's
    result could change with its position or the row count. With einsum every
    row is computed the same way, which point-permutation and rank-blocking
    guarantees rely on.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    return Tensor._wrap(np.einsum("nk,km->nm", a.data, b.data), (a, b), backward, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` with ``weight`` stored as (in, out)."""
    if x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear input width {x.shape[-1]} does not match weight {weight.shape}")
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


# -- fused normalisations ----------------------------------------------------

def softmax_temp(logits: Tensor, tau) -> Tensor:
    """Softmax over the last axis of ``logits / tau`` (row-max stabilised)."""
    logits, tau = as_tensor(logits), as_tensor(tau)
    if np.any(tau.data <= 0):
        raise DomainError(f"softmax temperature must be positive, min is {tau.data.min()!r}")
    z = logits.data / tau.data
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        gz = y * (g - (g * y).sum(axis=-1, keepdims=True))
        g_logits = unbroadcast(gz / tau.data, logits.shape)
        g_tau = unbroadcast(-gz * logits.data / (tau.data * tau.data), tau.shape)
        return g_logits, g_tau

    return Tensor._wrap(y, (logits, tau), backward, "softmax_temp")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    width = x.shape[-1]
    if gamma.shape != (width,) or beta.shape != (width,):
        raise ShapeError(f"layer_norm affine shapes {gamma.shape}/{beta.shape} do not match width {width}")
    mu = x.data.mean(axis=-1, keepdims=True)
    centred = x.data - mu
    inv_std = 1.0 / np.sqrt((centred * centred).mean(axis=-1, keepdims=True) + eps)
    xhat = centred * inv_std

    def backward(g):
        dxhat = g * gamma.data
        dx = inv_std * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return Tensor._wrap(xhat * gamma.data + beta.data, (x, gamma, beta), backward, "layer_norm")
