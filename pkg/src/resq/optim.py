"""Decoupled-weight-decay adaptive-moment optimizer and gradient clipping."""
from __future__ import annotations

import numpy as np

from .diffcore import ParamSet


def clip_global_norm(ps: ParamSet, max_norm: float) -> float:
    """Scale all trainable gradients so their global L2 norm is <= max_norm."""
    total = 0.0
    for _, t in ps.trainable():
        if t.grad is not None:
            total += float((t.grad ** 2).sum())
    norm = float(np.sqrt(total))
    if norm > max_norm > 0:
        factor = max_norm / norm
        for _, t in ps.trainable():
            if t.grad is not None:
                t.grad *= factor
    return norm


class AdamW:
    """Adam with decoupled weight decay over a ParamSet's trainable tensors."""

    def __init__(self, ps: ParamSet, betas: tuple[float, float] = (0.9, 0.95),
                 eps: float = 1e-8, weight_decay: float = 0.0):
        self.ps = ps
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {name: np.zeros_like(t.data) for name, t in ps.trainable()}
        self.v = {name: np.zeros_like(t.data) for name, t in ps.trainable()}

    def step(self, lr: float) -> None:
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.step_count
        bc2 = 1.0 - b2 ** self.step_count
        for name, t in self.ps.trainable():
            g = t.grad if t.grad is not None else np.zeros_like(t.data)
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * t.data
            t.data = t.data - lr * update

    def state_arrays(self, prefix: str = "opt.") -> dict[str, np.ndarray]:
        out = {prefix + "step": np.array([self.step_count], dtype=np.float64)}
        for name in self.m:
            out[prefix + "m." + name] = self.m[name].copy()
            out[prefix + "v." + name] = self.v[name].copy()
        return out

    def load_arrays(self, arrays: dict, prefix: str = "opt.") -> None:
        self.step_count = int(arrays[prefix + "step"][0])
        for name in self.m:
            self.m[name] = arrays[prefix + "m." + name].copy()
            self.v[name] = arrays[prefix + "v." + name].copy()
