"""AdamW with decoupled weight decay and a warmup + cosine learning-rate schedule."""

from __future__ import annotations

import math

import numpy as np

from .nn import Parameter


class MissingGradientError(RuntimeError):
    """Raised when step() runs before gradients were materialized."""


class CosineWarmupSchedule:
    """Linear ramp 0 -> base over the warmup epochs, then cosine decay to min."""

    def __init__(self, base_lr: float, warmup_epochs: int, total_epochs: int, min_lr: float = 1e-6):
        if total_epochs < warmup_epochs:
            raise ValueError("total_epochs must be >= warmup_epochs")
        self.base_lr = base_lr
        self.warmup_epochs = warmup_epochs
        self.total_epochs = total_epochs
        self.min_lr = min_lr

    def lr_at(self, epoch: int) -> float:
        if not 0 <= epoch <= self.total_epochs:
            raise ValueError(f"epoch {epoch} outside [0, {self.total_epochs}]")
        if epoch < self.warmup_epochs:
            return self.base_lr * epoch / self.warmup_epochs
        if self.total_epochs == self.warmup_epochs:
            return self.base_lr
        progress = (epoch - self.warmup_epochs) / (self.total_epochs - self.warmup_epochs)
        return self.min_lr + 0.5 * (self.base_lr - self.min_lr) * (1.0 + math.cos(math.pi * progress))


class AdamW:
    """Decoupled-weight-decay Adam; frozen parameters are never touched."""

    def __init__(self, params: list[Parameter], lr: float = 5e-4, weight_decay: float = 0.0,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for p, m, v in zip(self.params, self.m, self.v):
            if not p.trainable:
                continue
            if p.grad is None:
                raise MissingGradientError(f"parameter {p.name or '<unnamed>'} has no gradient; call backward first")
            g = p.grad
            m += (1.0 - self.beta1) * (g - m)
            v += (1.0 - self.beta2) * (g * g - v)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data -= self.lr * (update + self.weight_decay * p.data)

    def state_dict(self) -> dict:
        return {
            "step_count": self.step_count,
            "m": [m.copy() for m in self.m],
            "v": [v.copy() for v in self.v],
        }

    def load_state_dict(self, state: dict):
        self.step_count = int(state["step_count"])
        if len(state["m"]) != len(self.params):
            raise ValueError("optimizer state does not match parameter count")
        self.m = [np.asarray(m, dtype=np.float64).copy() for m in state["m"]]
        self.v = [np.asarray(v, dtype=np.float64).copy() for v in state["v"]]
