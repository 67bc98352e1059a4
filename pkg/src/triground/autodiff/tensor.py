"""Dense tensors with reverse-mode automatic differentiation.

Every differentiable primitive used by the pipeline lives here or in
:mod:`triground.autodiff.functional`. A :class:`Tensor` wraps a numpy array;
operations on tensors that require gradients record a closure computing the
vector-Jacobian product, and :meth:`Tensor.backward` replays those closures in
reverse topological order.
"""
from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from scipy import special

_state = threading.local()


def _get(name, default):
    return getattr(_state, name, default)


def get_default_dtype():
    return _get("dtype", np.float32)


@contextlib.contextmanager
def default_dtype(dtype):
    """Temporarily change the dtype used for new tensors built from python data."""
    prev = get_default_dtype()
    _state.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _state.dtype = prev


def grad_enabled() -> bool:
    return _get("grad", True)


@contextlib.contextmanager
def no_grad():
    prev = grad_enabled()
    _state.grad = False
    try:
        yield
    finally:
        _state.grad = prev


class ShapeError(ValueError):
    pass


class GraphError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op", "_consumed", "name")
    __array_ufunc__ = None  # make numpy defer to Tensor's reflected operators

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: Optional[str] = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            if isinstance(data, np.ndarray) and np.issubdtype(data.dtype, np.floating):
                dtype = data.dtype
            else:
                dtype = get_default_dtype()
        self.data = np.asarray(data, dtype=dtype)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self._op = "leaf"
        self._consumed = False
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __len__(self):
        return self.data.shape[0]

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    # -- autodiff ---------------------------------------------------------
    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into every leaf's ``grad``.

        The graph is released afterwards; calling backward again on the same
        output raises :class:`GraphError`.
        """
        if self._consumed:
            raise GraphError("backward already ran on this graph; run a new forward pass first")
        if not self.requires_grad:
            raise GraphError("tensor does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise GraphError("grad must be given for non-scalar outputs")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=self.data.dtype)

        order = _topo_order(self)
        grads = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if node._backward is None:
                if g is not None and node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                node._consumed = node._op != "leaf"
                continue
            if g is not None:
                pgrads = node._backward(g)
                for p, pg in zip(node._parents, pgrads):
                    if pg is None or not p.requires_grad:
                        continue
                    key = id(p)
                    if key in grads:
                        grads[key] = grads[key] + pg
                    else:
                        grads[key] = pg
            node._backward = None
            node._parents = ()
            node._consumed = True

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
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return max_(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def swapaxes(self, a, b):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))

    @property
    def T(self):
        return self.swapaxes(-1, -2)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)


def _topo_order(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        if node._consumed and node._op != "leaf":
            raise GraphError("graph contains a node whose backward already ran")
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype or get_default_dtype()))


def _make(out: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    t = Tensor(out, dtype=out.dtype)
    if grad_enabled() and any(p.requires_grad for p in parents):
        t.requires_grad = True
        t._parents = tuple(parents)
        t._backward = backward
        t._op = op
    return t


def unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are not broadcast-compatible") from None


# -- binary elementwise -----------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b, "add")
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b, "mul")
    ad, bd = a.data, b.data

    def backward(g):
        return (unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                unbroadcast(g * ad, bd.shape) if b.requires_grad else None)

    return _make(ad * bd, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        return (unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
                unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None)

    return _make(out, (a, b), backward, "div")


def _pair(a, b):
    if isinstance(a, Tensor) and isinstance(b, Tensor):
        return a, b
    if isinstance(a, Tensor):
        return a, as_tensor(b, a)
    if isinstance(b, Tensor):
        return as_tensor(a, b), b
    return as_tensor(a), as_tensor(b)


def maximum(a, b) -> Tensor:
    a, b = _pair(a, b)
    mask = a.data >= b.data
    return _make(np.where(mask, a.data, b.data), (a, b),
                 lambda g: (unbroadcast(g * mask, a.shape), unbroadcast(g * ~mask, b.shape)), "maximum")


# -- unary elementwise ------------------------------------------------------

def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def power(a: Tensor, p: float) -> Tensor:
    p = float(p)
    ad = a.data
    return _make(ad ** p, (a,), lambda g: (g * p * ad ** (p - 1),), "pow")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,), "log")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def abs_(a: Tensor) -> Tensor:
    ad = a.data
    return _make(np.abs(ad), (a,), lambda g: (g * np.sign(ad),), "abs")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1 - out * out),), "tanh")


def sigmoid(a: Tensor) -> Tensor:
    out = special.expit(a.data)
    return _make(out, (a,), lambda g: (g * out * (1 - out),), "sigmoid")


def relu(a: Tensor) -> Tensor:
    ad = a.data
    mask = ad > 0
    return _make(ad * mask, (a,), lambda g: (g * mask,), "relu")


_SQRT1_2 = 0.7071067811865476
_INV_SQRT_2PI = 0.3989422804014327


def gelu(a: Tensor) -> Tensor:
    """Exact GeLU, x * Phi(x) with Phi the standard normal CDF."""
    x = a.data
    cdf = 0.5 * (1.0 + special.erf(x * _SQRT1_2))
    out = x * cdf

    def backward(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
        return (g * (cdf + x * pdf),)

    return _make(out.astype(x.dtype, copy=False), (a,), backward, "gelu")


def softplus(a: Tensor) -> Tensor:
    x = a.data
    out = np.logaddexp(0.0, x).astype(x.dtype, copy=False)
    return _make(out, (a,), lambda g: (g * special.expit(x),), "softplus")


def log_sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = -np.logaddexp(0.0, -x).astype(x.dtype, copy=False)
    return _make(out, (a,), lambda g: (g * special.expit(-x),), "log_sigmoid")


# -- reductions -------------------------------------------------------------

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def _expand_reduced(g, shape, axes, keepdims):
    if not keepdims:
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def sum_(a: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    shape = a.shape
    out = a.data.sum(axis=axes, keepdims=keepdims)
    return _make(np.asarray(out), (a,), lambda g: (_expand_reduced(g, shape, axes, keepdims).copy(),), "sum")


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    shape = a.shape
    n = int(np.prod([shape[i] for i in axes])) if axes else 1
    if n == 0:
        raise ShapeError(f"mean over an empty axis of shape {shape}")
    out = a.data.mean(axis=axes, keepdims=keepdims)
    return _make(np.asarray(out), (a,), lambda g: (_expand_reduced(g, shape, axes, keepdims) / n,), "mean")


def max_(a: Tensor, axis=None, keepdims=False) -> Tensor:
    """Max reduction; the gradient goes to the first maximal entry."""
    x = a.data
    if axis is None:
        flat = x.reshape(-1)
        idx = int(np.argmax(flat))
        out = flat[idx]

        def backward(g):
            full = np.zeros(flat.shape, dtype=x.dtype)
            full[idx] = g
            return (full.reshape(x.shape),)

        return _make(np.asarray(out), (a,), backward, "max")
    ax = axis % x.ndim
    idx = np.expand_dims(np.argmax(x, axis=ax), ax)
    out = np.take_along_axis(x, idx, axis=ax)

    def backward(g):
        full = np.zeros(x.shape, dtype=x.dtype)
        gg = g if keepdims else np.expand_dims(g, ax)
        np.put_along_axis(full, idx, gg, axis=ax)
        return (full,)

    return _make(out if keepdims else np.squeeze(out, ax), (a,), backward, "max")


# -- shape manipulation -----------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def _has_advanced(index) -> bool:
    if not isinstance(index, tuple):
        index = (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in index)


def getitem(a: Tensor, index) -> Tensor:
    if isinstance(index, Tensor):
        index = index.data
    out = a.data[index]
    shape, dtype = a.shape, a.dtype
    advanced = _has_advanced(index)

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        if advanced:
            np.add.at(full, index, g)
        else:
            full[index] = g
        return (full,)

    return _make(np.array(out, copy=True), (a,), backward, "getitem")


def take_rows(a: Tensor, idx) -> Tensor:
    """Gather ``a[idx]`` along the first axis; ``idx`` may be any int array."""
    idx = np.asarray(idx, dtype=np.int64)
    n = a.shape[0]

    def backward(g):
        return (scatter_rows_np(g.reshape((-1,) + a.shape[1:]), idx.reshape(-1), n),)

    return _make(a.data[idx], (a,), backward, "take_rows")


def scatter_rows_np(src: np.ndarray, idx: np.ndarray, n: int) -> np.ndarray:
    """Row-wise segment sum: ``out[idx[i]] += src[i]`` for a 2D-or-more ``src``."""
    out = np.zeros((n,) + src.shape[1:], dtype=src.dtype)
    if idx.size:
        np.add.at(out, idx, src)
    return out


def scatter_rows(src: Tensor, idx, n: int) -> Tensor:
    """Differentiable segment sum of rows of ``src`` into ``n`` output rows."""
    idx = np.asarray(idx, dtype=np.int64)
    return _make(scatter_rows_np(src.data, idx, n), (src,), lambda g: (g[idx],), "scatter_rows")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ax = axis % tensors[0].ndim
    for t in tensors[1:]:
        if t.ndim != tensors[0].ndim or any(
                s != r for i, (s, r) in enumerate(zip(t.shape, tensors[0].shape)) if i != ax):
            raise ShapeError(f"concat: shapes {tensors[0].shape} and {t.shape} differ off axis {axis}")
    sizes = [t.shape[ax] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=ax)
    return _make(out, tuple(tensors), lambda g: tuple(np.split(g, splits, axis=ax)), "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)
    ax = axis % out.ndim
    return _make(out, tuple(tensors),
                 lambda g: tuple(np.take(g, i, axis=ax) for i in range(len(tensors))), "stack")


def where(cond, a, b) -> Tensor:
    """Select ``a`` where the constant boolean ``cond`` holds, else ``b``."""
    cond = np.asarray(cond.data if isinstance(cond, Tensor) else cond, dtype=bool)
    a, b = _pair(a, b)
    out = np.where(cond, a.data, b.data)
    return _make(out, (a, b), lambda g: (unbroadcast(np.where(cond, g, 0), a.shape),
                                         unbroadcast(np.where(cond, 0, g), b.shape)), "where")


def masked_fill(a: Tensor, mask, value: float) -> Tensor:
    mask = np.asarray(mask, dtype=bool)
    out = np.where(mask, np.asarray(value, dtype=a.dtype), a.data)
    return _make(out, (a,), lambda g: (unbroadcast(np.where(mask, 0, g), a.shape),), "masked_fill")


# -- linear algebra ---------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ for shapes {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch dims of {a.shape} and {b.shape} do not broadcast") from None
    ad, bd = a.data, b.data

    def backward(g):
        ga = unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return _make(ad @ bd, (a, b), backward, "matmul")


def parameters_of(tensors: Iterable[Tensor]) -> list:
    return [t for t in tensors if t.requires_grad]
