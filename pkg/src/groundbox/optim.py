"""RMSProp with per-group learning-rate multipliers, and the polynomial decay schedule."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor


@dataclass
class PolynomialSchedule:
    """lr(step) = base_lr * (1 - step / total_steps) ** power, defined on [0, total_steps]."""

    base_lr: float
    total_steps: int
    power: float = 1.0

    def lr(self, step: int) -> float:
        if not 0 <= step <= self.total_steps:
            raise ValueError(f"step {step} outside [0, {self.total_steps}]")
        return self.base_lr * (1.0 - step / self.total_steps) ** self.power


@dataclass
class RmsProp:
    """Squared-gradient running average update: p -= lr * g / (sqrt(v) + eps).

    Parameters are registered in groups; each group's effective learning rate
    is the scheduled rate times the group multiplier (0.1 for a pre-trained
    backbone portion, per the training defaults).
    """

    rho: float = 0.99
    eps: float = 1e-8
    _groups: list[tuple[Tensor, float, np.ndarray]] = field(default_factory=list)

    def register(self, params: list[Tensor], lr_mult: float = 1.0) -> None:
        for p in params:
            self._groups.append((p, lr_mult, np.zeros_like(p.data)))

    @property
    def params(self) -> list[Tensor]:
        return [p for p, _, _ in self._groups]

    def step(self, lr: float) -> None:
        for p, mult, v in self._groups:
            if p.grad is None:
                continue
            g = p.grad
            v *= self.rho
            v += (1.0 - self.rho) * g * g
            p.data -= (lr * mult) * g / (np.sqrt(v) + self.eps)
