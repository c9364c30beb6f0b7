"""A small reverse-mode automatic differentiation engine on numpy arrays.

Only the primitives the anomaly-detection objectives need are provided:
elementwise arithmetic with broadcasting, (batched) matmul, constant sparse
left-multiplication, ReLU, exp, log, reciprocal, Euclidean norm, unit
normalization, clamping from below, sums/means, indexing, reshaping and
stacking. Numpy ufuncs applied to a :class:`Tensor` raise immediately instead
of silently dropping the graph.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np
import scipy.sparse as sp


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")
    __array_ufunc__ = None  # np.exp(tensor) etc. must fail loudly

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        name: str | None = None,
        parents: tuple["Tensor", ...] = (),
        backward: Callable[[np.ndarray], None] | None = None,
        dtype=None,
    ):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self.name = name
        self._parents = parents
        self._backward = backward

    # -- basics -----------------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        label = f" {self.name}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.dtype})"

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def _const(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.dtype))

    # -- arithmetic ---------------------------------------------------------
    def __add__(self, other):
        other = self._const(other)
        a, b = self, other

        def back(g):
            _acc(a, _unbroadcast(g, a.shape))
            _acc(b, _unbroadcast(g, b.shape))

        return Tensor(a.data + b.data, parents=(a, b), backward=back)

    __radd__ = __add__

    def __neg__(self):
        a = self
        return Tensor(-a.data, parents=(a,), backward=lambda g: _acc(a, -g))

    def __sub__(self, other):
        return self + (-self._const(other))

    def __rsub__(self, other):
        return self._const(other) + (-self)

    def __mul__(self, other):
        other = self._const(other)
        a, b = self, other

        def back(g):
            _acc(a, _unbroadcast(g * b.data, a.shape))
            _acc(b, _unbroadcast(g * a.data, b.shape))

        return Tensor(a.data * b.data, parents=(a, b), backward=back)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return self * reciprocal(self._const(other))

    def __rtruediv__(self, other):
        return self._const(other) * reciprocal(self)

    def __pow__(self, power: float):
        if isinstance(power, Tensor):
            raise TypeError("tensor exponents are not supported")
        a, p = self, float(power)

        def back(g):
            _acc(a, g * p * a.data ** (p - 1.0))

        return Tensor(a.data ** p, parents=(a,), backward=back)

    def __matmul__(self, other):
        return matmul(self, self._const(other))

    def __getitem__(self, idx):
        a = self

        def back(g):
            full = np.zeros_like(a.data)
            np.add.at(full, idx, g)
            _acc(a, full)

        return Tensor(a.data[idx], parents=(a,), backward=back)

    # -- reductions / shape -------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False):
        a = self

        def back(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            _acc(a, np.broadcast_to(g, a.shape))

        return Tensor(a.data.sum(axis=axis, keepdims=keepdims), parents=(a,), backward=back)

    def mean(self, axis=None, keepdims: bool = False):
        count = self.data.size if axis is None else np.prod([self.shape[i] for i in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / float(count))

    def reshape(self, *shape):
        a = self
        return Tensor(a.data.reshape(*shape), parents=(a,), backward=lambda g: _acc(a, g.reshape(a.shape)))

    def swapaxes(self, i: int, j: int):
        a = self
        return Tensor(np.swapaxes(a.data, i, j), parents=(a,), backward=lambda g: _acc(a, np.swapaxes(g, i, j)))

    # -- autodiff -----------------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed needs a scalar")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.asarray(grad, dtype=self.dtype)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                if node._parents:
                    node.grad = None  # free intermediate gradients


def _acc(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    g = np.asarray(g, dtype=t.dtype)
    if t.grad is None:
        t.grad = g.copy() if g.shape == t.shape else np.broadcast_to(g, t.shape).copy()
    else:
        t.grad = t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# --------------------------------------------------------------------------
# primitives


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    def back(g):
        if a.requires_grad:
            _acc(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if b.requires_grad:
            _acc(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return Tensor(a.data @ b.data, parents=(a, b), backward=back)


def spmm(matrix, x: Tensor) -> Tensor:
    """``matrix @ x`` for a constant (sparse or dense) 2-D matrix."""
    m = matrix if isinstance(matrix, sp.csr_matrix) else matrix.tocsr() if sp.issparse(matrix) else np.asarray(matrix)
    out = m @ x.data
    # transpose is only needed (and only built) when gradients flow
    return Tensor(np.asarray(out, dtype=x.dtype), parents=(x,), backward=lambda g: _acc(x, m.T @ g))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0  # subgradient 0 at 0
    return Tensor(np.where(mask, x.data, 0).astype(x.dtype), parents=(x,), backward=lambda g: _acc(x, g * mask))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return Tensor(out, parents=(x,), backward=lambda g: _acc(x, g * out))


def log(x: Tensor) -> Tensor:
    return Tensor(np.log(x.data), parents=(x,), backward=lambda g: _acc(x, g / x.data))


def reciprocal(x: Tensor) -> Tensor:
    out = 1.0 / x.data
    return Tensor(out, parents=(x,), backward=lambda g: _acc(x, -g * out * out))


def norm(x: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    """Euclidean norm; the gradient at a zero vector is taken as zero."""
    n = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    safe = np.where(n > 0, n, 1.0)

    def back(g):
        gk = g if keepdims else np.expand_dims(g, axis)
        _acc(x, np.where(n > 0, gk * x.data / safe, 0.0))

    out = n if keepdims else np.squeeze(n, axis=axis)
    return Tensor(out, parents=(x,), backward=back)


def normalize(x: Tensor, axis: int = -1) -> Tensor:
    """``x / ||x||`` along ``axis``; zero vectors map to zero with zero gradient."""
    n = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    nz = n > 0
    safe = np.where(nz, n, 1.0)
    u = np.where(nz, x.data / safe, 0.0).astype(x.dtype)

    def back(g):
        radial = (u * g).sum(axis=axis, keepdims=True)
        _acc(x, np.where(nz, (g - u * radial) / safe, 0.0))

    return Tensor(u, parents=(x,), backward=back)


def clamp_min(x: Tensor, floor: float) -> Tensor:
    mask = x.data > floor
    return Tensor(np.where(mask, x.data, floor).astype(x.dtype), parents=(x,), backward=lambda g: _acc(x, g * mask))


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = list(tensors)

    def back(g):
        for i, t in enumerate(ts):
            _acc(t, np.take(g, i, axis=axis))

    return Tensor(np.stack([t.data for t in ts], axis=axis), parents=tuple(ts), backward=back)


def gradients(loss: Tensor, params: Iterable[Tensor]) -> list[np.ndarray]:
    """Gradients of a scalar ``loss`` for every parameter (zeros where unused)."""
    params = list(params)
    for p in params:
        p.grad = None
    loss.backward()
    return [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
