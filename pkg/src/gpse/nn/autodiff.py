"""Tape-free reverse-mode differentiation on numpy arrays.

Every primitive returns a ``Tensor`` holding its parents and a closure that
pushes the upstream gradient to them. ``Tensor.backward`` walks the graph in
reverse topological order, visiting each node once.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp

DTYPE = np.float64
# when True every primitive output is checked for NaN/Inf (slow; loss and
# gradients are always checked by the training loop)
CHECK_FINITE = False


class NonFiniteError(FloatingPointError):
    pass


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "_owned")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None,
                 op: str = ""):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad = None
        self._owned = False
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self.op = op
        if CHECK_FINITE and not np.all(np.isfinite(self.data)):
            raise NonFiniteError(f"non-finite values produced by {op or 'leaf'}")

    @property
    def shape(self):
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g: np.ndarray):
        # first gradient is stored by reference (it may alias another node's);
        # the buffer is only written in place once it is known to be private
        if self.grad is None:
            self.grad = g
            self._owned = False
        elif self._owned:
            self.grad += g
        else:
            self.grad = self.grad + g
            self._owned = True

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward without a gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self._accumulate(np.broadcast_to(grad, self.data.shape))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                if node._parents:
                    # interior gradients are not needed after propagation
                    node.grad = None

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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op!r})"


class Parameter(Tensor):
    __slots__ = ("name",)

    def __init__(self, data, name: str = ""):
        super().__init__(data, requires_grad=True)
        self.name = name


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward, op):
    req = any(p.requires_grad for p in parents)
    return Tensor(data, req, tuple(parents) if req else (), backward if req else None, op)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    return _make(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * out / b.data, b.shape))

    return _make(out, (a, b), backward, "div")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def backward(g):
        x._accumulate(g * mask)

    return _make(x.data * mask, (x,), backward, "relu")


def sigmoid(x: Tensor) -> Tensor:
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))

    def backward(g):
        x._accumulate(g * out * (1.0 - out))

    return _make(out, (x,), backward, "sigmoid")


def abs_(x: Tensor) -> Tensor:
    sign = np.sign(x.data)

    def backward(g):
        x._accumulate(g * sign)

    return _make(np.abs(x.data), (x,), backward, "abs")


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)

    def backward(g):
        x._accumulate(g * 0.5 / out)

    return _make(out, (x,), backward, "sqrt")


# ------------------------------------------------------------ linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch {a.shape} @ {b.shape}")

    def backward(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return _make(a.data @ b.data, (a, b), backward, "matmul")


def spmm(mat: sp.spmatrix, x: Tensor, mat_t: sp.spmatrix | None = None) -> Tensor:
    """Constant sparse matrix times tensor; ``mat_t`` may pass a cached transpose."""
    if mat.shape[1] != x.shape[0]:
        raise ShapeError(f"spmm shape mismatch {mat.shape} @ {x.shape}")

    def backward(g):
        x._accumulate((mat_t if mat_t is not None else mat.T) @ g)

    return _make(mat @ x.data, (x,), backward, "spmm")


class Index:
    """Integer index into ``size`` rows with cached gather/scatter operators."""

    def __init__(self, idx, size: int):
        self.idx = np.asarray(idx, dtype=np.int64)
        self.size = int(size)
        if self.idx.size and (self.idx.min() < 0 or self.idx.max() >= self.size):
            raise ShapeError("index out of range")
        self._scatter = None
        self._counts = None

    @property
    def scatter_matrix(self) -> sp.csr_matrix:
        # size x len(idx); row r sums the positions k with idx[k] == r
        if self._scatter is None:
            k = self.idx.size
            self._scatter = sp.csr_matrix(
                (np.ones(k, dtype=DTYPE), (self.idx, np.arange(k))), shape=(self.size, k)
            )
        return self._scatter

    @property
    def counts(self) -> np.ndarray:
        if self._counts is None:
            self._counts = np.bincount(self.idx, minlength=self.size).astype(DTYPE)
        return self._counts


def gather(x: Tensor, index: Index) -> Tensor:
    """Rows ``x[index.idx]``."""
    if x.shape[0] != index.size:
        raise ShapeError(f"gather from {x.shape[0]} rows with index over {index.size}")

    def backward(g):
        x._accumulate(index.scatter_matrix @ g)

    return _make(x.data[index.idx], (x,), backward, "gather")


def segment_sum(x: Tensor, index: Index) -> Tensor:
    """Row ``r`` of the output sums the rows ``k`` of ``x`` with ``idx[k] == r``."""
    if x.shape[0] != index.idx.size:
        raise ShapeError(f"segment_sum of {x.shape[0]} rows with {index.idx.size} segment ids")

    def backward(g):
        x._accumulate(g[index.idx])

    return _make(index.scatter_matrix @ x.data, (x,), backward, "segment_sum")


def concat(xs, axis: int = -1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        for x, part in zip(xs, np.split(g, splits, axis=axis)):
            if x.requires_grad:
                x._accumulate(part)

    return _make(np.concatenate([x.data for x in xs], axis=axis), xs, backward, "concat")


def getitem(x: Tensor, index) -> Tensor:
    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        x._accumulate(full)

    return _make(x.data[index], (x,), backward, "getitem")


# ------------------------------------------------------------- reductions


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        x._accumulate(np.broadcast_to(g, x.shape))

    return _make(np.sum(x.data, axis=axis, keepdims=keepdims), (x,), backward, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = x.data.size if axis is None else x.shape[axis]
    return mul(sum_(x, axis, keepdims), 1.0 / count)


# ------------------------------------------------------------- normalisers


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Affine normalisation of each row over the feature axis."""
    mu = x.data.mean(axis=1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def backward(g):
        if gamma.requires_grad:
            gamma._accumulate((g * xhat).sum(axis=0))
        if beta.requires_grad:
            beta._accumulate(g.sum(axis=0))
        if x.requires_grad:
            gx = g * gamma.data
            x._accumulate(inv * (gx - gx.mean(axis=1, keepdims=True)
                                 - xhat * (gx * xhat).mean(axis=1, keepdims=True)))

    return _make(out, (x, gamma, beta), backward, "layer_norm")


def l2_normalize(x: Tensor, segments: Index | None = None, axis: int = 0,
                 eps: float = 1e-12) -> Tensor:
    """``x / (||x|| + eps)`` with norms taken per column over ``axis``.

    With ``segments`` the norm of each column is taken separately within every
    group of rows sharing a segment id (one group per graph in a batch).
    """
    d = x.data
    if segments is None:
        norm = np.sqrt((d * d).sum(axis=axis, keepdims=True))
        norm_b = norm
    else:
        norm = np.sqrt(segments.scatter_matrix @ (d * d))
        norm_b = norm[segments.idx]
    denom = norm_b + eps
    out = d / denom

    def backward(g):
        s = g * d
        s = s.sum(axis=axis, keepdims=True) if segments is None else \
            (segments.scatter_matrix @ s)[segments.idx]
        safe = np.where(norm_b > 0, norm_b, 1.0)
        x._accumulate(g / denom - d * s / (denom * denom * safe))

    return _make(out, (x,), backward, "l2_normalize")
