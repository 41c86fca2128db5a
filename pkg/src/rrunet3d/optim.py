"""Adam with bias correction, plus the piecewise-constant rate schedule."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .engine.tensor import NonFiniteError, ShapeError, Tensor


@dataclass(frozen=True)
class LrSchedule:
    """Segments of (iteration_count, learning_rate); the last rate persists.

    The default runs 400 iterations at 1e-3 then 100 at 1e-4.
    """

    breakpoints: tuple = ((400, 1e-3), (100, 1e-4))

    def __post_init__(self):
        if not self.breakpoints:
            raise ValueError("schedule needs at least one (count, rate) segment")
        for count, rate in self.breakpoints:
            if count <= 0 or rate <= 0:
                raise ValueError("segment counts and rates must be positive")

    def lr_at(self, iteration: int) -> float:
        if iteration < 0:
            raise ValueError("iteration must be >= 0")
        edge = 0
        for count, rate in self.breakpoints:
            edge += count
            if iteration < edge:
                return rate
        return self.breakpoints[-1][1]

    @property
    def total_iterations(self) -> int:
        return sum(count for count, _ in self.breakpoints)


def lr_at(schedule: LrSchedule, iteration: int) -> float:
    return schedule.lr_at(iteration)


class Adam:
    """Per-parameter moment estimates over a fixed list of tensors."""

    def __init__(self, params, beta1: float = 0.9, beta2: float = 0.999,
                 eps_hat: float = 1e-8):
        self.params: list[Tensor] = list(params)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps_hat = eps_hat
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float) -> None:
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                continue
            if g.shape != p.data.shape:
                raise ShapeError(f"gradient shape {g.shape} != parameter shape {p.data.shape}")
            if not np.isfinite(g).all():
                raise NonFiniteError("non-finite gradient in adam step")
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * (g * g)
            m_hat = self.m[i] / c1
            v_hat = self.v[i] / c2
            p.data -= (lr * m_hat / (np.sqrt(v_hat) + self.eps_hat)).astype(p.data.dtype)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()
