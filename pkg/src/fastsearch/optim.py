"""Momentum SGD for network weights and Adam for architecture logits."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics.tensor import Tensor


@dataclass
class SGD:
    params: list[Tensor]
    lr: float
    momentum: float = 0.9
    weight_decay: float = 5e-4
    velocity: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if not self.velocity:
            self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self, scale: float = 1.0) -> None:
        """One update with gradients multiplied by ``scale``; params without grad are skipped."""
        for p, v in zip(self.params, self.velocity):
            if p.grad is None:
                continue
            g = p.grad * scale + self.weight_decay * p.data
            v *= self.momentum
            v += g
            p.data -= self.lr * v

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def state(self) -> dict[str, np.ndarray]:
        return {f"v{i}": v for i, v in enumerate(self.velocity)}

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        for i, v in enumerate(self.velocity):
            v[...] = arrays[f"v{i}"]


@dataclass
class Adam:
    params: list[Tensor]
    lr: float = 3e-4
    betas: tuple[float, float] = (0.5, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    t: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if not self.m:
            self.m = [np.zeros_like(p.data) for p in self.params]
            self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1, c2 = 1 - b1**self.t, 1 - b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad + self.weight_decay * p.data
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def state(self) -> dict[str, np.ndarray]:
        out = {"t": np.array([float(self.t)])}
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            out[f"m{i}"] = m
            out[f"v{i}"] = v
        return out

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        self.t = int(arrays["t"][0])
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            m[...] = arrays[f"m{i}"]
            v[...] = arrays[f"v{i}"]
