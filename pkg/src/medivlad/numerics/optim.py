"""AdamW and the learning-rate / weight-decay schedules used by every stage."""
from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .tensor import Parameter


def cosine_schedule(base: float, final: float, total_steps: int, warmup_steps: int = 0) -> np.ndarray:
    """Per-step values: linear warmup from 0, then cosine decay from base to final."""
    total_steps = max(int(total_steps), 1)
    warmup_steps = min(int(warmup_steps), total_steps)
    warm = np.linspace(0.0, base, warmup_steps, endpoint=False) if warmup_steps else np.zeros(0)
    rest = total_steps - warmup_steps
    t = np.arange(rest)
    decay = final + 0.5 * (base - final) * (1 + np.cos(math.pi * t / max(rest, 1)))
    return np.concatenate([warm, decay])


def linear_schedule(start: float, end: float, total_steps: int) -> np.ndarray:
    total_steps = max(int(total_steps), 1)
    if total_steps == 1:
        return np.array([start], dtype=np.float64)
    return np.linspace(start, end, total_steps)


class AdamW:
    """Adam moments with decoupled weight decay.

    Parameters whose name matches a bias or norm gain are excluded from decay
    when ``no_decay`` names are supplied.
    """

    def __init__(self, params: Sequence[Parameter], lr: float = 1e-3, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.0, no_decay: Sequence[bool] | None = None):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.no_decay = list(no_decay) if no_decay is not None else [False] * len(self.params)
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, m, v, skip in zip(self.params, self.m, self.v, self.no_decay):
            if p.grad is None:
                continue
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            if self.weight_decay and not skip:
                p.data *= p.data.dtype.type(1.0 - self.lr * self.weight_decay)
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data -= (self.lr * update).astype(p.data.dtype, copy=False)

    def zero_grad(self):
        for p in self.params:
            p.grad = None


def decay_mask(named_params) -> list[bool]:
    """True for parameters exempt from weight decay (biases, norms, tokens)."""
    out = []
    for name, p in named_params:
        leaf = name.rsplit(".", 1)[-1]
        out.append(p.ndim <= 1 or leaf in ("cls_token", "pos_embed"))
    return out
