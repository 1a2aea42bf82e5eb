"""AdamW with decoupled weight decay, and the warmup+cosine learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


@dataclass
class LrSchedule:
    """Linear warmup to lr0, then cosine decay to lr0 * final_fraction.

    lr(e) is continuous at the warmup boundary and non-increasing after it.
    """

    lr0: float = 1e-3
    final_fraction: float = 0.01
    warmup_epochs: float = 3.0
    total_epochs: float = 50.0

    def __post_init__(self):
        if self.lr0 <= 0:
            raise ValueError(f"lr0 must be > 0, got {self.lr0}")
        if not 0 < self.final_fraction <= 1:
            raise ValueError(f"final_fraction must be in (0, 1], got {self.final_fraction}")
        if not 0 <= self.warmup_epochs < self.total_epochs:
            raise ValueError("warmup_epochs must satisfy 0 <= warmup < total")


def lr_at(schedule: LrSchedule, epoch: float) -> float:
    """Learning rate at a (possibly fractional) epoch position."""
    if not 0 <= epoch <= schedule.total_epochs:
        raise ValueError(
            f"epoch {epoch} outside [0, {schedule.total_epochs}]")
    if epoch < schedule.warmup_epochs:
        return schedule.lr0 * epoch / schedule.warmup_epochs
    lo = schedule.lr0 * schedule.final_fraction
    span = schedule.total_epochs - schedule.warmup_epochs
    frac = (epoch - schedule.warmup_epochs) / span
    return lo + (schedule.lr0 - lo) * 0.5 * (1.0 + math.cos(math.pi * frac))


@dataclass
class OptimState:
    """Per-parameter AdamW moment buffers plus the shared step counter."""

    lr0: float = 1e-3
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(params: dict[str, Tensor], state: OptimState, lr: float) -> None:
    """One AdamW update over named parameters, reading their .grad buffers.

    Weight decay is decoupled: applied directly to the parameter before the
    bias-corrected moment update.  A NaN/inf gradient aborts the whole step.
    """
    if lr <= 0:
        raise ValueError(f"lr must be > 0, got {lr}")
    for name, p in params.items():
        g = p.grad
        if g is None:
            g = np.zeros_like(p.data)
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter '{name}'")
        if p.data.shape != g.shape:
            raise ValueError(f"gradient shape mismatch for parameter '{name}'")
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        if state.weight_decay:
            p.data -= np.float32(lr * state.weight_decay) * p.data
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        mhat = m / bc1
        vhat = v / bc2
        p.data -= np.float32(lr) * mhat / (np.sqrt(vhat) + np.float32(state.eps))
