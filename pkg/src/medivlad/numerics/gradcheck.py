"""Central-difference gradient checking."""
from __future__ import annotations

from typing import Callable

import numpy as np

from .tensor import Tensor, NonFiniteError, no_grad


def grad_check(fn: Callable[[Tensor], Tensor], point, eps: float = 1e-3,
               coords: int | None = None, seed: int = 0) -> float:
    """Max relative error between the analytic gradient and central differences.

    ``fn`` maps a tensor to a scalar tensor. The error per coordinate is
    ``|a - n| / max(1, |a|, |n|)``. ``coords`` restricts the numeric side to a
    seeded random subset of coordinates (the analytic side is always full).
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    base = np.array(point.data if isinstance(point, Tensor) else point, copy=True)
    x = Tensor(base, requires_grad=True, dtype=base.dtype)
    out = fn(x)
    if out.size != 1:
        raise ValueError(f"grad_check needs a scalar-valued closure, got shape {out.shape}")
    if out.requires_grad:
        out.backward()
        analytic = x.grad.astype(np.float64)
    else:
        analytic = np.zeros(base.shape)
    if not np.all(np.isfinite(analytic)):
        raise NonFiniteError("analytic gradient is not finite")

    flat = base.reshape(-1)
    idx = np.arange(flat.size)
    if coords is not None and coords < flat.size:
        idx = np.sort(np.random.default_rng(seed).choice(flat.size, coords, replace=False))
    numeric = np.empty(idx.size)
    with no_grad():
        for n, i in enumerate(idx):
            probe = flat.copy()
            probe[i] = flat[i] + eps
            hi = float(fn(Tensor(probe.reshape(base.shape), dtype=base.dtype)).data)
            probe[i] = flat[i] - eps
            lo = float(fn(Tensor(probe.reshape(base.shape), dtype=base.dtype)).data)
            numeric[n] = (hi - lo) / (2 * eps)
    if not np.all(np.isfinite(numeric)):
        raise NonFiniteError("numeric gradient is not finite")
    a = analytic.reshape(-1)[idx]
    denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(numeric)))
    return float(np.max(np.abs(a - numeric) / denom)) if idx.size else 0.0
