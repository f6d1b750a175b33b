"""Adaptive-moment optimizer with constant or cosine learning-rate decay."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ContractViolation

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LrSchedule:
    """lr(0) = lr_start and lr(total_steps) = lr_end; cosine interpolates."""

    kind: str  # "constant" or "cosine"
    lr_start: float
    lr_end: float = 0.0
    total_steps: int = 1

    def __post_init__(self):
        if self.kind not in ("constant", "cosine"):
            raise ContractViolation(f"unknown schedule kind {self.kind!r}")
        if self.kind == "cosine" and self.total_steps < 1:
            raise ContractViolation("cosine schedule needs total_steps >= 1")

    def at(self, step: int) -> float:
        if self.kind == "constant":
            return self.lr_start
        frac = min(max(step / self.total_steps, 0.0), 1.0)
        return self.lr_end + 0.5 * (self.lr_start - self.lr_end) * (1.0 + math.cos(math.pi * frac))


class Adam:
    """Adam with bias correction over a fixed list of parameter tensors.

    ``step()`` reads each parameter's ``grad`` (missing grads count as zero)
    and updates values in place. If any gradient is non-finite the whole
    update is skipped and the incident is counted and logged; the step
    counter still advances so the schedule keeps moving.
    """

    def __init__(self, params: list[ad.Tensor], schedule: LrSchedule,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.schedule = schedule
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.skipped = 0
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]

    def step(self) -> float:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.value)
                 for p in self.params]
        lr = self.schedule.at(self.step_count)
        self.step_count += 1
        if not all(np.all(np.isfinite(g)) for g in grads):
            self.skipped += 1
            log.warning("optimizer step %d skipped: non-finite gradient", self.step_count)
            return lr
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.value -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return lr

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
