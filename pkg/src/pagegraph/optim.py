"""Adam with global-norm clipping and the linear warmup/decay schedule."""

from __future__ import annotations

import math

import numpy as np

from .autodiff import ParameterRegistry
from .errors import ConfigError


class LinearWarmupSchedule:
    """Ramp linearly from 0 to the peak rate, then decay linearly back to 0.

    The peak sits at ``warmup_steps`` (by default 10% of the total); the
    rate is 0 at step 0 and again at the final step index (total - 1).
    """

    def __init__(self, peak_lr: float, total_steps: int, warmup_fraction: float = 0.1):
        if total_steps < 1:
            raise ConfigError(f"total_steps must be >= 1, got {total_steps}")
        if not 0.0 < warmup_fraction < 1.0:
            raise ConfigError(f"warmup_fraction must lie in (0, 1), got {warmup_fraction}")
        self.peak_lr = peak_lr
        self.total_steps = total_steps
        self.warmup_steps = max(1, int(round(warmup_fraction * total_steps)))

    def __call__(self, step: int) -> float:
        if step < self.warmup_steps:
            return self.peak_lr * step / self.warmup_steps
        tail = self.total_steps - 1 - self.warmup_steps
        if tail <= 0:
            return 0.0
        return self.peak_lr * max(0, self.total_steps - 1 - step) / tail


class ConstantSchedule:
    def __init__(self, lr: float):
        self.lr = lr

    def __call__(self, step: int) -> float:
        return self.lr


def clip_global_norm(registry: ParameterRegistry, max_norm: float) -> float:
    """Scale all gradients down if their joint L2 norm exceeds the bound."""
    total = 0.0
    for t in registry.tensors():
        if t.grad is not None:
            total += float((t.grad**2).sum())
    norm = math.sqrt(total)
    if max_norm > 0 and norm > max_norm:
        factor = max_norm / norm
        for t in registry.tensors():
            if t.grad is not None:
                t.grad *= factor
    return norm


class Adam:
    """Standard Adam with bias correction; one writer mutates the registry."""

    def __init__(
        self,
        registry: ParameterRegistry,
        schedule,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
        clip_norm: float = 1.0,
    ):
        self.registry = registry
        self.schedule = schedule
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.clip_norm = clip_norm
        self.step_count = 0
        self._m = {name: np.zeros_like(t.data) for name, t in registry.items()}
        self._v = {name: np.zeros_like(t.data) for name, t in registry.items()}

    def step(self) -> float:
        """Apply one update from the accumulated gradients; returns the lr used."""
        lr = self.schedule(self.step_count)
        clip_global_norm(self.registry, self.clip_norm)
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        for name, param in self.registry.items():
            g = param.grad
            if g is None:
                continue
            m = self._m[name]
            v = self._v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            param.data = param.data - lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
        return lr
