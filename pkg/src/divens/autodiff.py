"""Dense float64 arrays with a reverse-mode differentiation tape.

A :class:`Tensor` wraps a numpy array and remembers how it was computed.
Calling :func:`backward` on a scalar tensor sweeps the recorded graph in
reverse topological order and accumulates ``grad`` on every tensor that
requires it.  Leaf gradients accumulate across calls until reset with
:func:`zero_grad`.

Most operations accept arbitrary leading batch axes; the "matrix" axes are
always the trailing two.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.linalg import lapack

from .errors import NumericalError, ShapeError, UsageError

DEFAULT_JITTER = 1e-6


def as_matrix(data, *, name: str = "matrix") -> np.ndarray:
    """Return ``data`` as a finite, 2-D, row-major float64 array."""
    arr = np.array(data, dtype=np.float64, order="C")
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


class Tensor:
    """A node of the differentiation graph."""

    __slots__ = ("value", "grad", "requires_grad", "name", "_parents", "_backward")
    __array_priority__ = 100.0

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        value = np.asarray(value, dtype=np.float64)
        if not np.all(np.isfinite(value)):
            raise ValueError("tensor values must be finite")
        self.value = value
        self.requires_grad = requires_grad
        self.name = name
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @classmethod
    def _result(cls, value: np.ndarray, parents: Sequence["Tensor"], backward) -> "Tensor":
        out = cls.__new__(cls)
        out.value = value
        out.name = None
        out.grad = None
        out.requires_grad = any(p.requires_grad for p in parents)
        out._parents = tuple(parents) if out.requires_grad else ()
        out._backward = backward if out.requires_grad else None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def item(self) -> float:
        return float(self.value)

    def numpy(self) -> np.ndarray:
        return self.value

    def _accumulate(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        self.grad += g

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # operator sugar
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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


def tensor(x) -> Tensor:
    """Wrap constants; pass tensors through."""
    if isinstance(x, Tensor):
        return x
    out = Tensor.__new__(Tensor)
    out.value = np.asarray(x, dtype=np.float64)
    out.requires_grad = False
    out.name = None
    out.grad = None
    out._parents = ()
    out._backward = None
    return out


def parameter(value, name: str | None = None) -> Tensor:
    return Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=name)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)

    def backward(g):
        a._accumulate(_unbroadcast(g, a.shape))
        b._accumulate(_unbroadcast(g, b.shape))

    return Tensor._result(a.value + b.value, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)

    def backward(g):
        a._accumulate(_unbroadcast(g, a.shape))
        b._accumulate(_unbroadcast(-g, b.shape))

    return Tensor._result(a.value - b.value, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.value, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.value, b.shape))

    return Tensor._result(a.value * b.value, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    out = a.value / b.value

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.value, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * out / b.value, b.shape))

    return Tensor._result(out, (a, b), backward)


def neg(a) -> Tensor:
    a = tensor(a)
    return Tensor._result(-a.value, (a,), lambda g: a._accumulate(-g))


def exp(a) -> Tensor:
    a = tensor(a)
    out = np.exp(a.value)
    return Tensor._result(out, (a,), lambda g: a._accumulate(g * out))


def log(a) -> Tensor:
    a = tensor(a)
    return Tensor._result(np.log(a.value), (a,), lambda g: a._accumulate(g / a.value))


def square(a) -> Tensor:
    a = tensor(a)
    return Tensor._result(a.value * a.value, (a,), lambda g: a._accumulate(2.0 * g * a.value))


def relu(a) -> Tensor:
    a = tensor(a)
    mask = a.value > 0
    return Tensor._result(np.where(mask, a.value, 0.0), (a,), lambda g: a._accumulate(g * mask))


def tanh(a) -> Tensor:
    a = tensor(a)
    out = np.tanh(a.value)
    return Tensor._result(out, (a,), lambda g: a._accumulate(g * (1.0 - out * out)))


def maximum(a, floor: float) -> Tensor:
    """Elementwise ``max(a, floor)`` for a constant floor; no gradient where floored."""
    a = tensor(a)
    mask = a.value >= floor
    return Tensor._result(np.where(mask, a.value, floor), (a,), lambda g: a._accumulate(g * mask))


# ---------------------------------------------------------------- reductions / shape


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = tensor(a)
    out = a.value.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.shape).copy())

    return Tensor._result(np.asarray(out), (a,), backward)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = tensor(a)
    count = a.value.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / float(count))


def reshape(a, shape) -> Tensor:
    a = tensor(a)
    return Tensor._result(a.value.reshape(shape), (a,), lambda g: a._accumulate(g.reshape(a.shape)))


def transpose(a) -> Tensor:
    """Swap the two trailing axes."""
    a = tensor(a)
    return Tensor._result(np.swapaxes(a.value, -1, -2), (a,), lambda g: a._accumulate(np.swapaxes(g, -1, -2)))


def permute(a, axes: Sequence[int]) -> Tensor:
    a = tensor(a)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return Tensor._result(np.transpose(a.value, axes), (a,), lambda g: a._accumulate(np.transpose(g, inverse)))


def take(a, index) -> Tensor:
    """Basic or advanced indexing, ``a[index]``."""
    a = tensor(a)

    def backward(g):
        full = np.zeros_like(a.value)
        np.add.at(full, index, g)
        a._accumulate(full)

    return Tensor._result(np.asarray(a.value[index]), (a,), backward)


def stack(items: Sequence, axis: int = 0) -> Tensor:
    items = [tensor(t) for t in items]
    out = np.stack([t.value for t in items], axis=axis)

    def backward(g):
        for i, t in enumerate(items):
            t._accumulate(np.take(g, i, axis=axis))

    return Tensor._result(out, items, backward)


def concat(items: Sequence, axis: int = 0) -> Tensor:
    items = [tensor(t) for t in items]
    out = np.concatenate([t.value for t in items], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in items])

    def backward(g):
        for t, lo, hi in zip(items, bounds[:-1], bounds[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            t._accumulate(g[tuple(sl)])

    return Tensor._result(out, items, backward)


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    """Matrix product over the trailing two axes (batched, broadcasting)."""
    a, b = tensor(a), tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs at least 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g @ np.swapaxes(b.value, -1, -2), a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(np.swapaxes(a.value, -1, -2) @ g, b.shape))

    return Tensor._result(a.value @ b.value, (a, b), backward)


def softmax(z, axis: int = -1) -> Tensor:
    z = tensor(z)
    shifted = z.value - z.value.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        z._accumulate(out * (g - (g * out).sum(axis=axis, keepdims=True)))

    return Tensor._result(out, (z,), backward)


def softmax_rows(z) -> Tensor:
    """Row-wise softmax with max subtraction."""
    return softmax(z, axis=-1)


def log_softmax(z, axis: int = -1) -> Tensor:
    z = tensor(z)
    shifted = z.value - z.value.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def backward(g):
        z._accumulate(g - probs * g.sum(axis=axis, keepdims=True))

    return Tensor._result(out, (z,), backward)


def normalize_columns(y, eps: float = 1e-8, axis: int = -2) -> Tensor:
    """Divide each column (vectors along ``axis``) by ``max(||col||_2, eps)``."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    y = tensor(y)
    norms = np.sqrt((y.value * y.value).sum(axis=axis, keepdims=True))
    active = norms >= eps
    denom = np.where(active, norms, eps)
    out = y.value / denom

    def backward(g):
        radial = np.where(active, out * (g * out).sum(axis=axis, keepdims=True), 0.0)
        y._accumulate((g - radial) / denom)

    return Tensor._result(out, (y,), backward)


def _cholesky_batched(gram: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.cholesky(gram)
    except np.linalg.LinAlgError:
        flat = gram.reshape(-1, gram.shape[-2], gram.shape[-1])
        for b, mat in enumerate(flat):
            _, info = lapack.dpotrf(mat, lower=1)
            if info > 0:
                raise NumericalError(
                    f"Gram matrix not positive definite (batch element {b}, "
                    f"leading minor of order {info} fails)",
                    pivot=int(info) - 1,
                ) from None
        raise NumericalError("Cholesky factorization failed") from None


def log_det_gram(y, jitter: float = DEFAULT_JITTER) -> Tensor:
    """``log det(YᵀY + jitter·I)`` for ``y`` of shape (..., C, M) via Cholesky.

    With ``jitter == 0`` and more columns than rows the Gram matrix is singular
    by construction and the call is rejected.
    """
    if jitter < 0:
        raise ValueError("jitter must be non-negative")
    y = tensor(y)
    if y.ndim < 2:
        raise ShapeError("log_det_gram needs a matrix argument")
    rows, cols = y.shape[-2], y.shape[-1]
    if jitter == 0 and cols > rows:
        raise NumericalError(
            f"det(Y^T Y) = 0 for a {rows}x{cols} matrix with more columns than rows; "
            "a positive jitter is required",
            pivot=rows,
        )
    yv = y.value
    gram = np.swapaxes(yv, -1, -2) @ yv
    if jitter:
        gram = gram + jitter * np.eye(cols)
    chol = _cholesky_batched(gram)
    diag = np.diagonal(chol, axis1=-2, axis2=-1)
    out = 2.0 * np.log(diag).sum(axis=-1)

    def backward(g):
        linv = np.linalg.inv(chol)
        gram_inv = np.swapaxes(linv, -1, -2) @ linv
        y._accumulate(2.0 * (yv @ gram_inv) * np.asarray(g)[..., None, None])

    return Tensor._result(np.asarray(out), (y,), backward)


# ---------------------------------------------------------------- differentiation


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Accumulate d(loss)/d(leaf) into every leaf's ``grad``; return the leaf map."""
    if not isinstance(loss, Tensor) or loss.value.size != 1:
        raise UsageError("backward() needs a scalar loss tensor")
    if not loss.requires_grad:
        return {}
    order = _topological_order(loss)
    for node in order:
        if not node.is_leaf:
            node.grad = None
    loss._accumulate(np.ones_like(loss.value))
    leaves: dict[Tensor, np.ndarray] = {}
    for node in reversed(order):
        if node.is_leaf:
            if node.grad is not None:
                leaves[node] = node.grad
            continue
        if node.grad is not None:
            node._backward(node.grad)
    return leaves


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------- finite differences


def numerical_gradient(fn: Callable[[list[np.ndarray]], float], arrays: list[np.ndarray], h: float = 1e-4) -> list[np.ndarray]:
    """Central differences of ``fn`` w.r.t. every element of every array."""
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr)
        flat, gflat = arr.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = fn(arrays)
            flat[i] = orig - h
            down = fn(arrays)
            flat[i] = orig
            gflat[i] = (up - down) / (2.0 * h)
        grads.append(g)
    return grads


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-10) -> float:
    a, n = np.ravel(analytic), np.ravel(numeric)
    scale = max(np.linalg.norm(a), np.linalg.norm(n), floor)
    return float(np.linalg.norm(a - n) / scale)


def check_gradients(build: Callable[[list[Tensor]], Tensor], arrays: Sequence[np.ndarray], h: float = 1e-4) -> float:
    """Compare backward() against central differences; return the worst relative error.

    ``build`` maps a list of leaf tensors to a scalar loss tensor.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    leaves = [parameter(a) for a in arrays]
    backward(build(leaves))
    analytic = [np.zeros_like(a) if t.grad is None else t.grad for a, t in zip(arrays, leaves)]

    def value(current):
        return build([tensor(c) for c in current]).item()

    numeric = numerical_gradient(value, arrays, h)
    return max(relative_error(a, n) for a, n in zip(analytic, numeric))
