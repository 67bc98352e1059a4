"""Central finite-difference gradient checking."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, Optional, Sequence

import numpy as np

from .tensor import Tensor


class NonFiniteLoss(ArithmeticError):
    pass


@dataclass
class GradCheckReport:
    max_rel_err: float
    per_param: Dict[str, float] = field(default_factory=dict)
    n_checked: int = 0

    def passed(self, tol: float) -> bool:
        return self.max_rel_err <= tol


def _scalar(f: Callable[[], Tensor]) -> float:
    out = f()
    val = float(np.asarray(out.data).reshape(-1)[0])
    if not np.isfinite(val):
        raise NonFiniteLoss(f"loss is not finite: {val}")
    return val


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor] | Dict[str, Tensor], h: float = 1e-5,
               max_coords: Optional[int] = None, seed: int = 0) -> GradCheckReport:
    """Compare autodiff gradients of the scalar ``f()`` against central differences.

    The relative error of an entry is ``|a - n| / max(|a|, |n|, floor)`` with
    ``floor = max(1e-3 * max|grad| over the parameter, noise)`` where
    ``noise = max(1e-8, 10 * eps / h) * max(1, |f|)`` and ``eps`` is the machine
    epsilon of the loss dtype. The first term keeps near-zero entries of a live
    parameter from dominating; the second is the round-off level of a central
    difference (``eps * |f| / h`` with margin), so parameters
    whose true gradient is exactly zero (e.g. a bias feeding a normalization)
    are not reported as failures on numerical noise alone. ``max_coords`` caps the
    number of coordinates probed (sampled uniformly without replacement).
    """
    if not isinstance(params, dict):
        params = {f"p{i}": p for i, p in enumerate(params)}
    for p in params.values():
        p.grad = None
        p.data = np.ascontiguousarray(p.data)
    out = f()
    val = float(np.asarray(out.data).reshape(-1)[0])
    if not np.isfinite(val):
        raise NonFiniteLoss(f"loss is not finite: {val}")
    eps = float(np.finfo(np.asarray(out.data).dtype).eps)
    noise = max(1e-8, 10 * eps / h) * max(1.0, abs(val))
    out.backward()
    analytic = {k: (np.zeros_like(p.data) if p.grad is None else p.grad.copy()) for k, p in params.items()}

    coords = [(k, i) for k, p in params.items() for i in range(p.data.size)]
    if max_coords is not None and len(coords) > max_coords:
        rng = np.random.default_rng(seed)
        pick = rng.choice(len(coords), size=max_coords, replace=False)
        coords = [coords[j] for j in sorted(pick)]

    per_param: Dict[str, float] = {}
    for k, i in coords:
        p = params[k]
        flat = p.data.reshape(-1)
        orig = flat[i]
        flat[i] = orig + h
        fp = _scalar(f)
        flat[i] = orig - h
        fm = _scalar(f)
        flat[i] = orig
        num = (fp - fm) / (2 * h)
        a = float(analytic[k].reshape(-1)[i])
        floor = max(1e-3 * float(np.max(np.abs(analytic[k]))), noise)
        err = abs(a - num) / max(abs(a), abs(num), floor)
        per_param[k] = max(per_param.get(k, 0.0), err)
    return GradCheckReport(max(per_param.values(), default=0.0), per_param, len(coords))
