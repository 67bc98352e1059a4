"""Parameter bookkeeping and the AdamW optimizer."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np

from .nn import Module, Parameter


@dataclass
class ParamStore:
    """Named parameters with frozen flags, in a fixed (registration) order."""

    params: Dict[str, Parameter] = field(default_factory=dict)

    @classmethod
    def from_module(cls, module: Module) -> "ParamStore":
        return cls(dict(module.named_parameters()))

    @property
    def frozen(self) -> Dict[str, bool]:
        return {k: p.frozen for k, p in self.params.items()}

    def trainable(self) -> Dict[str, Parameter]:
        return {k: p for k, p in self.params.items() if not p.frozen}

    def counts(self) -> tuple:
        """(trainable, frozen) scalar counts."""
        tr = sum(int(np.prod(p.shape)) for p in self.params.values() if not p.frozen)
        fr = sum(int(np.prod(p.shape)) for p in self.params.values() if p.frozen)
        return tr, fr

    def frozen_digest(self) -> str:
        h = hashlib.sha256()
        for name, p in self.params.items():
            if p.frozen:
                h.update(name.encode())
                h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None


class AdamW:
    """Adam with decoupled weight decay and bias correction.

    Frozen parameters are never touched, whatever their ``grad`` holds.
    """

    def __init__(self, store: ParamStore, lr: float = 1e-3, betas=(0.9, 0.999), weight_decay: float = 1e-5,
                 eps: float = 1e-8):
        self.store = store
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.weight_decay = weight_decay
        self.eps = eps
        self.t = 0
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}

    def step(self, grads: Optional[Dict[str, np.ndarray]] = None):
        trainable = self.store.trainable()
        if grads is None:
            grads = {k: p.grad for k, p in trainable.items()}
        missing = [k for k in trainable if grads.get(k) is None]
        if missing:
            raise ValueError(f"missing gradient for trainable parameter(s): {', '.join(missing[:5])}")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for name, p in trainable.items():
            g = np.asarray(grads[name], dtype=p.dtype)
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            v = self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p.data
            p.data = (p.data - self.lr * update).astype(p.dtype)


def adamw_step(store: ParamStore, grads: Dict[str, np.ndarray], optimizer: AdamW, lr: Optional[float] = None):
    """Apply one AdamW update from ``grads`` using ``optimizer``'s moment state."""
    if lr is not None:
        optimizer.lr = lr
    optimizer.step(grads)
    return store
