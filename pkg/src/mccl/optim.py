"""AdamW with decoupled weight decay, plus global-norm gradient clipping."""

from __future__ import annotations

import logging
from typing import Sequence

import numpy as np

from mccl.tensor import Tensor

log = logging.getLogger(__name__)


class AdamW:
    def __init__(self, params: Sequence[Tensor], lr: float = 1e-4, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 1e-2):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = [np.zeros(p.shape, dtype=np.float64) for p in self.params]
        self.v = [np.zeros(p.shape, dtype=np.float64) for p in self.params]
        self.t = 0
        self.skipped = 0

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, lr: float | None = None) -> bool:
        """Apply one update; returns False (and counts a skip) on non-finite gradients."""
        lr = self.lr if lr is None else lr
        grads = [np.zeros(p.shape) if p.grad is None else p.grad.astype(np.float64) for p in self.params]
        if not all(np.all(np.isfinite(g)) for g in grads):
            self.skipped += 1
            log.warning("non-finite gradient; optimizer step skipped (%d so far)", self.skipped)
            return False
        self.t += 1
        c1 = 1 - self.beta1 ** self.t
        c2 = 1 - self.beta2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            w = p.data.astype(np.float64)
            w *= 1 - lr * self.weight_decay
            w -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data[...] = w
        return True


def clip_grad_norm(params: Sequence[Tensor], max_norm: float) -> float:
    """Rescale gradients in place so their global L2 norm is at most ``max_norm``."""
    total = float(np.sqrt(sum(np.sum(np.square(p.grad, dtype=np.float64)) for p in params if p.grad is not None)))
    if np.isfinite(total) and total > max_norm:
        factor = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = (p.grad * factor).astype(p.grad.dtype)
    return total
