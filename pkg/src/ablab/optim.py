"""SGD and AdamW updates, warm-up/cosine schedule and learning-rate rebounds."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ShapeError

REBOUND_FLOOR_FACTOR = 1e-8


def sgd_step(w: np.ndarray, grad_sum: np.ndarray, lr: float, batch_size: int) -> np.ndarray:
    """One batch SGD step from the *sum* of per-sample gradients."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if w.shape != grad_sum.shape:
        raise ShapeError(f"weight {w.shape} and gradient {grad_sum.shape} differ")
    return w - (lr / batch_size) * grad_sum


class SGD:
    """Plain SGD on mean gradients. Stateless apart from the step counter."""

    def __init__(self):
        self.t = 0

    def reset(self, pieces: dict[str, np.ndarray]) -> None:
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float) -> dict[str, np.ndarray]:
        self.t += 1
        return {k: sgd_step(w, grads[k], lr, 1) for k, w in params.items()}


@dataclass
class AdamW:
    """Adam with decoupled weight decay.

    Moment buffers are kept for every piece of the model, trained or frozen,
    so their shapes always mirror the current representation. ``step`` only
    touches the pieces it is given.
    """

    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def reset(self, pieces: dict[str, np.ndarray]) -> None:
        self.m = {k: np.zeros_like(p) for k, p in pieces.items()}
        self.v = {k: np.zeros_like(p) for k, p in pieces.items()}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float) -> dict[str, np.ndarray]:
        beta1, beta2 = self.betas
        self.t += 1
        bc1 = 1.0 - beta1**self.t
        bc2 = 1.0 - beta2**self.t
        out = {}
        for key, w in params.items():
            g = grads[key]
            if key not in self.m:
                self.m[key] = np.zeros_like(w)
                self.v[key] = np.zeros_like(w)
            m, v = self.m[key], self.v[key]
            if m.shape != w.shape or g.shape != w.shape:
                raise ShapeError(f"{key}: optimizer state {m.shape} vs param {w.shape} (missed state reset?)")
            m = beta1 * m + (1.0 - beta1) * g
            v = beta2 * v + (1.0 - beta2) * (g * g)
            self.m[key], self.v[key] = m, v
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            out[key] = w * (1.0 - lr * self.weight_decay) - lr * update
        return out


def reset_states_for_shape_change(optimizer, pieces: dict[str, np.ndarray]):
    """Zero all moment buffers at the shapes in ``pieces`` and restart ``t``."""
    optimizer.reset(pieces)
    return optimizer


@dataclass(frozen=True)
class Rebound:
    start: int
    steps: int
    floor: float


@dataclass(frozen=True)
class LrSchedule:
    """Linear warm-up followed by cosine decay, with an optional rebound.

    Steps are zero-based indices of the update being taken. A rebound drops
    the rate to ``1e-8 * base_lr`` at its start step and ramps linearly back
    to the base schedule value reached ``steps`` later.
    """

    base_lr: float
    total_steps: int
    warmup_steps: int = 0
    min_lr: float = 0.0
    kind: str = "cosine"
    rebound: Rebound | None = None

    def base(self, step: int) -> float:
        if self.kind == "constant":
            return self.base_lr
        if step < self.warmup_steps:
            return self.base_lr * (step + 1) / self.warmup_steps
        span = max(1, self.total_steps - self.warmup_steps)
        progress = min(1.0, (step - self.warmup_steps) / span)
        return self.min_lr + (self.base_lr - self.min_lr) * 0.5 * (1.0 + math.cos(math.pi * progress))

    def __call__(self, step: int) -> float:
        base = self.base(step)
        r = self.rebound
        if r is None or step < r.start or step >= r.start + r.steps:
            return base
        target = self.base(r.start + r.steps)
        ramp = r.floor + (step - r.start) / r.steps * (target - r.floor)
        return min(ramp, base)

    def start_rebound(self, current_step: int, rebound_steps: int) -> LrSchedule:
        if rebound_steps < 1:
            raise ValueError("rebound_steps must be >= 1")
        floor = REBOUND_FLOOR_FACTOR * self.base_lr
        return replace(self, rebound=Rebound(start=current_step, steps=rebound_steps, floor=floor))


def start_rebound(schedule: LrSchedule, current_step: int, rebound_steps: int) -> LrSchedule:
    return schedule.start_rebound(current_step, rebound_steps)
