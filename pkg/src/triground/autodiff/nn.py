"""Minimal module system: named parameters, frozen flags, buffers, common layers."""
from __future__ import annotations

import contextlib
import threading
from typing import Iterator, Optional

import numpy as np

from . import functional as F
from .tensor import Tensor, gelu, get_default_dtype, relu

_init_state = threading.local()


@contextlib.contextmanager
def shape_only():
    """Build modules without allocating parameter memory (for parameter counting)."""
    prev = getattr(_init_state, "shape_only", False)
    _init_state.shape_only = True
    try:
        yield
    finally:
        _init_state.shape_only = prev


def _alloc(shape, rng: Optional[np.random.Generator], std: float, fill: float = 0.0):
    dtype = get_default_dtype()
    if getattr(_init_state, "shape_only", False):
        return np.broadcast_to(np.asarray(0, dtype=dtype), shape)
    if rng is None or std == 0.0:
        return np.full(shape, fill, dtype=dtype)
    return (rng.standard_normal(shape) * std).astype(dtype)


class Parameter(Tensor):
    __slots__ = ("frozen",)

    def __init__(self, data, frozen: bool = False):
        super().__init__(data, requires_grad=not frozen)
        self.frozen = frozen

    def freeze(self, frozen: bool = True):
        self.frozen = frozen
        self.requires_grad = not frozen


class Module:
    """Container with attribute-registered parameters, buffers and submodules."""

    training = True

    def __setattr__(self, key, value):
        if isinstance(value, Parameter):
            self.__dict__.setdefault("_params", {})[key] = value
        elif isinstance(value, Module):
            self.__dict__.setdefault("_modules", {})[key] = value
        elif isinstance(value, (list, tuple)) and value and all(isinstance(v, Module) for v in value):
            self.__dict__.setdefault("_modules", {})[key] = ModuleList(value)
            value = self.__dict__["_modules"][key]
        object.__setattr__(self, key, value)

    def register_buffer(self, name: str, value: np.ndarray):
        self.__dict__.setdefault("_buffers", {})[name] = name
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple]:
        for name, p in self.__dict__.get("_params", {}).items():
            yield prefix + name, p
        for name, m in self.__dict__.get("_modules", {}).items():
            yield from m.named_parameters(prefix + name + ".")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple]:
        for name in self.__dict__.get("_buffers", {}):
            yield prefix + name, getattr(self, name)
        for name, m in self.__dict__.get("_modules", {}).items():
            yield from m.named_buffers(prefix + name + ".")

    def set_buffer(self, dotted: str, value: np.ndarray):
        mod = self
        *path, leaf = dotted.split(".")
        for part in path:
            mod = mod._modules[part]
        getattr(mod, leaf)[...] = value

    def modules(self) -> Iterator["Module"]:
        yield self
        for m in self.__dict__.get("_modules", {}).values():
            yield from m.modules()

    def train(self, mode: bool = True):
        for m in self.modules():
            object.__setattr__(m, "training", mode)
        return self

    def eval(self):
        return self.train(False)

    def freeze(self, frozen: bool = True):
        for p in self.parameters():
            p.freeze(frozen)
        return self

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def to(self, dtype):
        """Cast parameters and buffers in place to ``dtype``."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        for m in self.modules():
            for name in m.__dict__.get("_buffers", {}):
                object.__setattr__(m, name, getattr(m, name).astype(dtype))
        return self

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError


class ModuleList(Module):
    def __init__(self, items):
        for i, m in enumerate(items):
            setattr(self, str(i), m)
        object.__setattr__(self, "_items", list(items))

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i):
        return self._items[i]


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng=None, bias: bool = True, std: Optional[float] = None):
        std = (1.0 / np.sqrt(d_in)) if std is None else std
        self.weight = Parameter(_alloc((d_in, d_out), rng, std))
        self.bias = Parameter(_alloc((d_out,), None, 0.0)) if bias else None

    def forward(self, x):
        return F.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        self.weight = Parameter(_alloc((d,), None, 0.0, 1.0))
        self.bias = Parameter(_alloc((d,), None, 0.0))
        self.eps = eps

    def forward(self, x):
        return F.layer_norm(x, self.weight, self.bias, self.eps)


class BatchNorm(Module):
    """Batch norm over the channel axis 1; momentum 0.1 and eps 1e-5."""

    def __init__(self, c: int, momentum: float = 0.1, eps: float = 1e-5):
        self.weight = Parameter(_alloc((c,), None, 0.0, 1.0))
        self.bias = Parameter(_alloc((c,), None, 0.0))
        self.register_buffer("running_mean", np.zeros(c, dtype=get_default_dtype()))
        self.register_buffer("running_var", np.ones(c, dtype=get_default_dtype()))
        self.momentum, self.eps = momentum, eps

    def forward(self, x):
        return F.batch_norm(x, self.weight, self.bias, self.running_mean, self.running_var,
                            self.training, self.momentum, self.eps)


class MLP(Module):
    """Two linear layers with a nonlinearity between them."""

    def __init__(self, d_in: int, d_hidden: int, d_out: int, rng=None, act: str = "gelu"):
        self.fc1 = Linear(d_in, d_hidden, rng)
        self.fc2 = Linear(d_hidden, d_out, rng)
        self.act = act

    def forward(self, x):
        h = self.fc1(x)
        h = gelu(h) if self.act == "gelu" else relu(h)
        return self.fc2(h)


class MultiHeadAttention(Module):
    """Projected multi-head attention. The output projection has no bias, so zero
    value projections make the whole block output exactly zero."""

    def __init__(self, d: int, heads: int, rng=None, d_kv: Optional[int] = None):
        if d % heads:
            raise ValueError(f"model dim {d} is not divisible by {heads} heads")
        d_kv = d if d_kv is None else d_kv
        self.q = Linear(d, d, rng)
        self.k = Linear(d_kv, d, rng, bias=False)  # a key bias cancels in the softmax
        self.v = Linear(d_kv, d, rng)
        self.o = Linear(d, d, rng, bias=False)
        self.heads = heads

    def forward(self, x, context=None, mask=None):
        context = x if context is None else context
        out = F.attention(self.q(x), self.k(context), self.v(context), self.heads, mask)
        return self.o(out)
