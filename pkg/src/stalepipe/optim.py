"""Parameter update rules: plain SGD and unified momentum.

The momentum rule keeps two auxiliary vectors per parameter block,

    y[n+1]  = x[n] - lr * g
    ys[n+1] = x[n] - s * lr * g
    x[n+1]  = y[n+1] + beta * (ys[n+1] - ys[n])

with ys[0] = x[0] so the first correction is zero (momentum starts at rest).
s = 1 recovers Nesterov's accelerated gradient; beta = 0 recovers plain SGD
bit for bit. Each block owns an independent state; nothing is shared.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import NonFiniteError


@dataclass
class LrSchedule:
    """Piecewise-constant schedule: base rate times every factor whose step has passed."""

    base: float
    decays: tuple[tuple[int, float], ...] = ()

    def __post_init__(self):
        if self.base <= 0:
            raise ValueError("base learning rate must be positive")
        for step, factor in self.decays:
            if factor <= 0:
                raise ValueError("decay factors must be positive")


def lr_at(schedule: LrSchedule, n: int) -> float:
    if n < 0:
        raise ValueError("step must be non-negative")
    lr = schedule.base
    for step, factor in schedule.decays:
        if n >= step:
            lr *= factor
    return lr


def sgd_step(x: np.ndarray, g: np.ndarray, lr: float) -> np.ndarray:
    if x.shape != g.shape:
        raise ValueError(f"shape mismatch: x {x.shape}, g {g.shape}")
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    if not np.isfinite(g).all():
        raise NonFiniteError("non-finite gradient in sgd_step")
    return x - lr * g


@dataclass
class OptimizerState:
    """Per-block update state. Auxiliary vectors exist only for the momentum rule."""

    rule: str  # "sgd" | "sum"
    beta: float = 0.0
    s: float = 1.0
    y: np.ndarray | None = None
    ys: np.ndarray | None = None
    n: int = 0

    def __post_init__(self):
        if self.rule not in ("sgd", "sum"):
            raise ValueError(f"unknown optimizer rule: {self.rule!r}")
        if not (0.0 <= self.beta < 1.0):
            raise ValueError("beta must lie in [0, 1)")
        if self.s < 0.0:
            raise ValueError("s must be non-negative")

    @classmethod
    def for_params(cls, rule: str, x0: np.ndarray, beta: float = 0.0, s: float = 1.0):
        state = cls(rule=rule, beta=beta, s=s)
        if rule == "sum":
            state.y = x0.copy()
            state.ys = x0.copy()  # ys[0] = x[0]: first momentum correction is zero
        return state


def sum_step(state: OptimizerState, x: np.ndarray, g: np.ndarray, lr: float) -> np.ndarray:
    if state.rule != "sum" or state.y is None or state.ys is None:
        raise RuntimeError("momentum state not initialized; use OptimizerState.for_params")
    if not np.isfinite(g).all():
        raise NonFiniteError("non-finite gradient in sum_step")
    y_new = x - lr * g
    ys_new = x - (state.s * lr) * g
    if state.beta == 0.0:
        x_new = y_new
    else:
        x_new = y_new + state.beta * (ys_new - state.ys)
    state.y = y_new
    state.ys = ys_new
    return x_new


def apply_update(state: OptimizerState, x: np.ndarray, g: np.ndarray, lr: float) -> np.ndarray:
    """Advance one step under the state's rule; returns the new parameters."""
    if state.rule == "sgd":
        out = sgd_step(x, g, lr)
    else:
        out = sum_step(state, x, g, lr)
    state.n += 1
    return out
