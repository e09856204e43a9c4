"""Reverse-mode automatic differentiation over dense float64 numpy arrays.

Each :class:`DiffTensor` holds its forward value eagerly and a closure that
pushes its output gradient back to its parents.  Gradients accumulate
additively, so shared subexpressions need no special handling.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

_ids = itertools.count()


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for an op."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = shapes
        super().__init__(f"{op}: incompatible shapes {' vs '.join(str(s) for s in shapes)}")


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class DiffTensor:
    __slots__ = ("data", "grad", "requires_grad", "node_id", "op", "_parents", "_backward", "_owned")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), op: str = ""):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self._owned = False
        self.requires_grad = requires_grad
        self.node_id = next(_ids)
        self.op = op
        self._parents = _parents
        self._backward: Callable[[np.ndarray], None] | None = None

    # -- bookkeeping -------------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self):
        return f"DiffTensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None
        self._owned = False

    def _accum(self, g: np.ndarray):
        # incoming arrays may be views shared with other nodes, so the first one is
        # stored as is and only a buffer allocated here is ever updated in place
        if self.grad is None:
            self.grad = np.asarray(g, dtype=np.float64)
        elif self._owned:
            self.grad += g
        else:
            self.grad = self.grad + g
            self._owned = True

    def backward(self):
        backward(self)

    # -- operator sugar ----------------------------------------------------
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
        if isinstance(other, DiffTensor):
            return div(self, other)
        return scale(self, 1.0 / other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def tensor(data, requires_grad: bool = False) -> DiffTensor:
    return DiffTensor(data, requires_grad=requires_grad)


def as_tensor(x) -> DiffTensor:
    return x if isinstance(x, DiffTensor) else DiffTensor(x)


def _node(data, parents: Sequence[DiffTensor], op: str, backward_fn) -> DiffTensor:
    req = any(p.requires_grad for p in parents)
    out = DiffTensor(data, requires_grad=req, _parents=tuple(parents) if req else (), op=op)
    if req:
        out._backward = backward_fn
    return out


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def _check_broadcast(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


def add(a, b) -> DiffTensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)

    def bw(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g, b.shape))

    return _node(a.data + b.data, (a, b), "add", bw)


def sub(a, b) -> DiffTensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)

    def bw(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(-g, b.shape))

    return _node(a.data - b.data, (a, b), "sub", bw)


def mul(a, b) -> DiffTensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)

    def bw(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g * a.data, b.shape))

    return _node(a.data * b.data, (a, b), "mul", bw)


def div(a, b) -> DiffTensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("div", a, b)
    out = a.data / b.data

    def bw(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(-g * out / b.data, b.shape))

    return _node(out, (a, b), "div", bw)


def scale(a: DiffTensor, c: float) -> DiffTensor:
    c = float(c)

    def bw(g):
        a._accum(g * c)

    return _node(a.data * c, (a,), "scale", bw)


def relu(a: DiffTensor) -> DiffTensor:
    mask = a.data > 0

    def bw(g):
        a._accum(g * mask)

    return _node(np.where(mask, a.data, 0.0), (a,), "relu", bw)


def sigmoid(a: DiffTensor) -> DiffTensor:
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))

    def bw(g):
        a._accum(g * out * (1.0 - out))

    return _node(out, (a,), "sigmoid", bw)


def abs_(a: DiffTensor) -> DiffTensor:
    def bw(g):
        a._accum(g * np.sign(a.data))

    return _node(np.abs(a.data), (a,), "abs", bw)


def square(a: DiffTensor) -> DiffTensor:
    def bw(g):
        a._accum(2.0 * g * a.data)

    return _node(a.data * a.data, (a,), "square", bw)


def sqrt(a: DiffTensor) -> DiffTensor:
    out = np.sqrt(a.data)

    def bw(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            d = np.where(out > 0, 0.5 / np.where(out > 0, out, 1.0), 0.0)
        a._accum(g * d)

    return _node(out, (a,), "sqrt", bw)


# ---------------------------------------------------------------------------
# linear algebra and shape ops
# ---------------------------------------------------------------------------

def matmul(a, b) -> DiffTensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape) from None

    def bw(g):
        if a.requires_grad:
            a._accum(_unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape))
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                # shared weight matrix: fold the batch into one GEMM
                k = a.shape[-1]
                b._accum(a.data.reshape(-1, k).T @ g.reshape(-1, g.shape[-1]))
            else:
                b._accum(_unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape))

    return _node(out, (a, b), "matmul", bw)


def transpose(a: DiffTensor, axes=None) -> DiffTensor:
    """Permute axes; the default swaps the last two (matrix transpose)."""
    if axes is None:
        if a.ndim < 2:
            raise ShapeError("transpose", a.shape)
        axes = list(range(a.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def bw(g):
        a._accum(np.transpose(g, inv))

    return _node(np.transpose(a.data, axes), (a,), "transpose", bw)


def reshape(a: DiffTensor, shape) -> DiffTensor:
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, tuple(shape)) from None

    def bw(g):
        a._accum(g.reshape(a.shape))

    return _node(out, (a,), "reshape", bw)


def concat(tensors: Sequence, axis: int = 0) -> DiffTensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError("concat", *(t.shape for t in tensors)) from None
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        for t, piece in zip(tensors, np.split(g, sizes, axis=axis)):
            if t.requires_grad:
                t._accum(piece)

    return _node(out, tensors, "concat", bw)


def getitem(a: DiffTensor, index) -> DiffTensor:
    out = a.data[index]
    basic = _is_basic_index(index)

    def bw(g):
        full = np.zeros_like(a.data)
        if basic:
            full[index] += g
        else:
            np.add.at(full, index, g)
        a._accum(full)

    return _node(out, (a,), "getitem", bw)


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (slice, int, type(None), type(Ellipsis))) for i in items)


def gather(a: DiffTensor, indices, axis: int = 0) -> DiffTensor:
    """``np.take`` along one axis; repeated indices accumulate on backward."""
    indices = np.asarray(indices)
    axis = axis % a.ndim
    out = np.take(a.data, indices, axis=axis)

    def bw(g):
        full = np.zeros_like(a.data)
        moved = np.moveaxis(full, axis, 0)
        gm = np.moveaxis(g, list(range(axis, axis + indices.ndim)), list(range(indices.ndim)))
        np.add.at(moved, indices, gm)
        a._accum(full)

    return _node(out, (a,), "gather", bw)


def take_along(a: DiffTensor, indices: np.ndarray, axis: int) -> DiffTensor:
    """``np.take_along_axis`` with scatter-add adjoint."""
    indices = np.asarray(indices)
    out = np.take_along_axis(a.data, indices, axis=axis)

    def bw(g):
        full = np.zeros_like(a.data)
        idx = list(np.indices(indices.shape, sparse=True))
        idx[axis % a.ndim] = indices
        np.add.at(full, tuple(idx), g)
        a._accum(full)

    return _node(out, (a,), "take_along", bw)


def einsum(subscripts: str, *operands) -> DiffTensor:
    """Two- or one-operand einsum with explicit output subscripts."""
    ops = [as_tensor(o) for o in operands]
    if "->" not in subscripts:
        raise ValueError("einsum requires explicit output subscripts")
    lhs, out_sub = subscripts.replace(" ", "").split("->")
    in_subs = lhs.split(",")
    if len(in_subs) != len(ops):
        raise ValueError("einsum: subscript count does not match operand count")
    for s, o in zip(in_subs, ops):
        if len(s) != o.ndim or len(set(s)) != len(s):
            raise ShapeError(f"einsum[{subscripts}]", *(o.shape for o in ops))
    try:
        out = np.einsum(subscripts, *(o.data for o in ops), optimize=len(ops) > 2)
    except ValueError:
        raise ShapeError(f"einsum[{subscripts}]", *(o.shape for o in ops)) from None

    def bw(g):
        for k, o in enumerate(ops):
            if not o.requires_grad:
                continue
            others = [s for j, s in enumerate(in_subs) if j != k]
            target = in_subs[k]
            avail = set(out_sub).union(*others) if others else set(out_sub)
            kept = "".join(c for c in target if c in avail)
            expr = ",".join([out_sub] + others) + "->" + kept
            part = np.einsum(expr, g, *(ops[j].data for j in range(len(ops)) if j != k),
                             optimize=len(ops) > 2)
            if kept != target:
                shape = [o.shape[i] if c in kept else 1 for i, c in enumerate(target)]
                order = [kept.index(c) for c in target if c in kept]
                part = np.transpose(part, order) if order != sorted(order) else part
                part = np.broadcast_to(part.reshape(shape), o.shape)
            o._accum(part)

    return _node(out, ops, "einsum", bw)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def _expand(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        axes = (axis,) if isinstance(axis, int) else axis
        axes = sorted(a % len(shape) for a in axes)
        for ax in axes:
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def sum_(a: DiffTensor, axis=None, keepdims: bool = False) -> DiffTensor:
    def bw(g):
        a._accum(_expand(g, a.shape, axis, keepdims))

    return _node(a.data.sum(axis=axis, keepdims=keepdims), (a,), "sum", bw)


def mean(a: DiffTensor, axis=None, keepdims: bool = False) -> DiffTensor:
    out = a.data.mean(axis=axis, keepdims=keepdims)
    n = a.data.size / max(out.size, 1)

    def bw(g):
        a._accum(_expand(g, a.shape, axis, keepdims) / n)

    return _node(out, (a,), "mean", bw)


def _arg_reduce(a: DiffTensor, axis: int, fn, op: str) -> DiffTensor:
    axis = axis % a.ndim
    idx = fn(a.data, axis=axis)
    out = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis=axis).squeeze(axis)

    def bw(g):
        full = np.zeros_like(a.data)
        np.put_along_axis(full, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
        a._accum(full)

    return _node(out, (a,), op, bw)


def max_(a: DiffTensor, axis: int) -> DiffTensor:
    """Max along an axis; the gradient goes to the first maximizer."""
    return _arg_reduce(a, axis, np.argmax, "max")


def min_(a: DiffTensor, axis: int) -> DiffTensor:
    """Min along an axis; the gradient goes to the first minimizer."""
    return _arg_reduce(a, axis, np.argmin, "min")


def norm(a: DiffTensor, axis=-1, keepdims: bool = False) -> DiffTensor:
    """Euclidean norm along ``axis``.  The subgradient at zero is taken as 0."""
    out = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=keepdims))

    def bw(g):
        o = out if keepdims else np.expand_dims(out, axis)
        gg = g if keepdims else np.expand_dims(g, axis)
        safe = np.where(o > 0, o, 1.0)
        a._accum(np.where(o > 0, gg * a.data / safe, 0.0))

    return _node(out, (a,), "norm", bw)


def sqnorm(a: DiffTensor, axis=-1, keepdims: bool = False) -> DiffTensor:
    out = (a.data * a.data).sum(axis=axis, keepdims=keepdims)

    def bw(g):
        gg = g if keepdims else np.expand_dims(g, axis)
        a._accum(2.0 * gg * a.data)

    return _node(out, (a,), "sqnorm", bw)


def dot(a, b, axis: int = -1) -> DiffTensor:
    return sum_(mul(a, b), axis=axis)


def softmax(a: DiffTensor, axis: int = -1) -> DiffTensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        # full Jacobian-vector product: J = diag(s) - s s^T
        a._accum(s * (g - (g * s).sum(axis=axis, keepdims=True)))

    return _node(s, (a,), "softmax", bw)


def center(a: DiffTensor, axis: int = -2) -> DiffTensor:
    """Subtract the mean over ``axis`` (the point axis of a ``(..., K, 3)`` cloud)."""
    return sub(a, mean(a, axis=axis, keepdims=True))


# ---------------------------------------------------------------------------
# graph traversal
# ---------------------------------------------------------------------------

def _topo_order(root: DiffTensor) -> list[DiffTensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if node.node_id in seen:
            continue
        seen.add(node.node_id)
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and p.node_id not in seen:
                stack.append((p, False))
    return order


def backward(loss: DiffTensor) -> None:
    """Accumulate d(loss)/d(node) into ``.grad`` of every requires_grad node."""
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topo_order(loss)
    loss._accum(np.ones_like(loss.data))
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------------------
# SVD and gradient checking
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Svd3:
    u: np.ndarray
    s: np.ndarray
    v: np.ndarray


def svd3(m) -> Svd3:
    """Forward-only SVD of a 3x3 matrix; ``u @ diag(s) @ v.T == m``."""
    m = np.asarray(m, dtype=np.float64)
    if m.shape != (3, 3):
        raise ShapeError("svd3", m.shape)
    if not np.all(np.isfinite(m)):
        raise ValueError("svd3: input contains NaN or Inf")
    u, s, vt = np.linalg.svd(m)
    return Svd3(u=u, s=s, v=vt.T)


def grad_check(scalar_fn: Callable[[], DiffTensor], params: Iterable[DiffTensor],
               eps: float = 1e-5) -> float:
    """Max relative error between backward() and central differences."""
    params = list(params)
    for p in params:
        p.zero_grad()
    loss = scalar_fn()
    backward(loss)
    worst = 0.0
    for p in params:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + eps
            up = scalar_fn().item()
            flat[i] = old - eps
            down = scalar_fn().item()
            flat[i] = old
            numeric = (up - down) / (2 * eps)
            a = analytic.reshape(-1)[i]
            if not (np.isfinite(a) and np.isfinite(numeric)):
                return float("inf")
            err = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
            worst = max(worst, err)
    for p in params:
        p.zero_grad()
    return worst
