"""Adam optimizer and the reduce-on-plateau / early-stopping schedule."""

from __future__ import annotations

import math
from typing import Iterable

import numpy as np

from .tensor import Tensor

__all__ = ["Adam", "PlateauScheduler"]


class Adam:
    """Bias-corrected Adam over a fixed parameter list.

    Parameters missing a gradient are treated as having a zero gradient
    (their moments still decay, the weights do not move from zero state).
    """

    def __init__(
        self,
        params: Iterable[Tensor],
        lr: float = 1e-3,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                g = 0.0
            self._m[i] = self.beta1 * self._m[i] + (1.0 - self.beta1) * g
            self._v[i] = self.beta2 * self._v[i] + (1.0 - self.beta2) * (g * g)
            m_hat = self._m[i] / bc1
            v_hat = self._v[i] / bc2
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


class PlateauScheduler:
    """Cut the LR by ``factor`` after ``plateau_tolerance`` non-improving
    epochs; signal a stop after ``stop_tolerance`` of them.

    A single epochs-since-improvement counter drives both rules: the LR is
    cut each time the counter passes another full tolerance window
    (counter = 3, 6, ... for tolerance 2), and ``step`` returns stop=True
    once the counter exceeds the stop tolerance. The LR never increases.
    """

    def __init__(
        self,
        lr: float,
        factor: float = 0.6,
        plateau_tolerance: int = 2,
        stop_tolerance: int = 5,
        mode: str = "min",
    ):
        if mode not in ("min", "max"):
            raise ValueError(f"mode must be 'min' or 'max', got {mode!r}")
        self.lr = lr
        self.factor = factor
        self.plateau_tolerance = plateau_tolerance
        self.stop_tolerance = stop_tolerance
        self.mode = mode
        self.best: float | None = None
        self.bad_epochs = 0

    def _improved(self, metric: float) -> bool:
        if self.best is None:
            return True
        return metric < self.best if self.mode == "min" else metric > self.best

    def step(self, metric: float) -> tuple[float, bool]:
        """Consume one epoch's validation metric; returns (lr, stop)."""
        if not math.isfinite(metric):
            raise ValueError(f"scheduler metric must be finite, got {metric}")
        if self._improved(metric):
            self.best = metric
            self.bad_epochs = 0
            return self.lr, False
        self.bad_epochs += 1
        if self.bad_epochs % (self.plateau_tolerance + 1) == 0:
            self.lr *= self.factor
        return self.lr, self.bad_epochs > self.stop_tolerance
