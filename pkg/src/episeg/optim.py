"""SGD with momentum and per-parameter learning-rate multipliers."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .tensor import Tensor, TapeError


@dataclass
class SgdState:
    learning_rate: float
    momentum: float = 0.0
    velocity: dict[int, np.ndarray] = field(default_factory=dict)
    lr_multiplier: dict[int, float] = field(default_factory=dict)

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")

    def set_multiplier(self, params: Iterable[Tensor], value: float) -> None:
        for p in params:
            self.lr_multiplier[id(p)] = float(value)


def sgd_step(params: list[Tensor], state: SgdState) -> None:
    """v <- momentum*v + grad;  p <- p - lr*mult*v;  then zero the grads."""
    for p in params:
        if p.grad is None:
            raise TapeError(f"sgd_step: parameter {p.name or p.shape} has no gradient buffer")
    for p in params:
        v = state.velocity.get(id(p))
        if v is None:
            v = state.velocity[id(p)] = np.zeros_like(p.data)
        elif v.shape != p.data.shape:
            raise ValueError(f"sgd_step: velocity shape {v.shape} != parameter shape {p.data.shape}")
        v *= state.momentum
        v += p.grad
        p.data -= state.learning_rate * state.lr_multiplier.get(id(p), 1.0) * v
        p.grad.fill(0.0)
