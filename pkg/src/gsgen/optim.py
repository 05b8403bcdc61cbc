"""Adam with per-group learning rates and state that follows density-control index maps."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class Adam:
    lrs: dict[str, float]
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-15
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def update(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]):
        """In-place update of every parameter group that has a learning rate."""
        self.step += 1
        bc1 = 1.0 - self.beta1**self.step
        bc2 = 1.0 - self.beta2**self.step
        for name, p in params.items():
            lr = self.lrs.get(name, 0.0)
            if lr == 0.0 or p.size == 0:
                continue
            g = np.asarray(grads[name], dtype=np.float64)
            m = self.m.get(name)
            if m is None or m.shape != p.shape:
                m = np.zeros(p.shape, p.dtype)
                self.v[name] = np.zeros(p.shape, p.dtype)
            m = (self.beta1 * m + (1.0 - self.beta1) * g).astype(p.dtype)
            v = (self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g).astype(p.dtype)
            self.m[name], self.v[name] = m, v
            upd = lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p[...] = (p - upd).astype(p.dtype)

    def remap(self, parent: np.ndarray, groups):
        """Reindex moments after density control; new Gaussians start from zero moments."""
        keep = parent >= 0
        for name in groups:
            if name not in self.m:
                continue
            for store in (self.m, self.v):
                old = store[name]
                new = np.zeros((len(parent),) + old.shape[1:], old.dtype)
                new[keep] = old[parent[keep]]
                store[name] = new
