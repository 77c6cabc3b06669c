"""AdamW over dicts of numpy arrays."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamW:
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    clip: float | None = 1.0
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def step(self, params: dict, grads: dict, lr: float | None = None) -> float:
        """Update ``params`` in place; returns the pre-clip global grad norm."""
        lr = self.lr if lr is None else lr
        norm = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
        factor = 1.0
        if self.clip is not None and norm > self.clip:
            factor = self.clip / norm
        self.t += 1
        b1, b2 = self.betas
        c1, c2 = 1 - b1**self.t, 1 - b2**self.t
        for k, g in grads.items():
            g = g * factor
            m = self.m.get(k)
            if m is None:
                m = self.m[k] = np.zeros_like(g)
                self.v[k] = np.zeros_like(g)
            v = self.v[k]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p = params[k]
            if self.weight_decay:
                p *= 1 - lr * self.weight_decay
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return norm


def cosine_lr(base: float, step: int, total: int, warmup: int = 0, floor: float = 0.1) -> float:
    if warmup and step < warmup:
        return base * (step + 1) / warmup
    frac = (step - warmup) / max(1, total - warmup)
    return base * (floor + (1 - floor) * 0.5 * (1 + np.cos(np.pi * min(1.0, frac))))
