"""AdamW with decoupled weight decay and the per-epoch cosine schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class ScheduleConfig:
    eta_max: float = 1e-3
    eta_min: float = 1e-6
    total_epochs: int = 100

    def __post_init__(self):
        if not 0 <= self.eta_min < self.eta_max:
            raise ValueError(f"need 0 <= eta_min < eta_max, got {self.eta_min}, {self.eta_max}")
        if self.total_epochs < 1:
            raise ValueError("total_epochs must be >= 1")


def cosine_lr(t: float, cfg: ScheduleConfig = ScheduleConfig()) -> float:
    """eta_min + (eta_max - eta_min) * (1 + cos(pi t / T)) / 2.

    The first half is evaluated as a convex combination of the two rates so
    t = 0 and t = T return them bit-exactly. The second half mirrors the
    first, lr(t) = (eta_max + eta_min) - lr(T - t); that subtraction is
    exact (operands within a factor of two), so lr(t) + lr(T - t) equals
    eta_max + eta_min with no rounding. The midpoint is the halved sum.
    """
    T = cfg.total_epochs
    if not 0 <= t <= T:
        raise ValueError(f"epoch {t} outside [0, {T}]")
    if 2 * t == T:
        return 0.5 * (cfg.eta_max + cfg.eta_min)
    if 2 * t > T and t != T:
        return (cfg.eta_max + cfg.eta_min) - _convex_lr(T - t, cfg)
    return _convex_lr(t, cfg)


def _convex_lr(t: float, cfg: ScheduleConfig) -> float:
    w = 0.5 * (1.0 + math.cos(math.pi * t / cfg.total_epochs))
    return cfg.eta_max * w + cfg.eta_min * (1.0 - w)


class AdamW:
    """Adam moments with bias correction; decay applied to the weights, not the gradient.

    theta <- theta * (1 - lr * wd) - lr * m_hat / (sqrt(v_hat) + eps)
    """

    def __init__(self, named_params, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 1e-5):
        self.params = list(named_params)
        names = [n for n, _ in self.params]
        if len(set(names)) != len(names):
            raise ValueError("duplicate parameter names")
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {n: np.zeros_like(p.data) for n, p in self.params}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params}

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        missing = [n for n, p in self.params if p.grad is None]
        if missing:
            raise ValueError(f"no gradient for parameter {missing[0]}" + (f" (+{len(missing) - 1} more)" if len(missing) > 1 else ""))
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1**t
        c2 = 1.0 - self.beta2**t
        for name, p in self.params:
            g = p.grad
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data = (p.data * (1.0 - lr * self.weight_decay) - lr * update).astype(p.data.dtype, copy=False)

    def moments(self) -> dict[str, tuple[np.ndarray, np.ndarray]]:
        return {n: (self.m[n], self.v[n]) for n, _ in self.params}

    def load_moments(self, moments: dict, step_count: int) -> None:
        for name, (m, v) in moments.items():
            if name in self.m:
                self.m[name] = m.astype(self.m[name].dtype).copy()
                self.v[name] = v.astype(self.v[name].dtype).copy()
        self.step_count = int(step_count)


def adamw_step(optimizer: AdamW, lr: float | None = None) -> None:
    optimizer.step(lr)
