"""Adam optimizer and the two-milestone step learning-rate schedule."""

from __future__ import annotations

from dataclasses import dataclass, field
from decimal import Decimal
from typing import Mapping

import numpy as np

from .errors import EpochOutOfRangeError, NonFiniteGradientError, ShapeMismatchError
from .tensor import Tensor


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update, in place on ``params[name].data`` and ``state``.

    Every parameter must have a finite gradient of its own shape. Moments are
    kept in the parameter's dtype.
    """
    for name, p in params.items():
        if name not in grads:
            raise ShapeMismatchError(f"no gradient for parameter {name!r}")
        g = np.asarray(grads[name])
        if g.shape != p.shape:
            raise ShapeMismatchError(f"gradient for {name!r} has shape {g.shape}, parameter has {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"non-finite gradient for {name!r}")

    state.t += 1
    t = state.t
    for name, p in params.items():
        dt = p.dtype.type
        b1, b2 = dt(state.beta1), dt(state.beta2)
        g = np.asarray(grads[name], dtype=p.dtype)
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * (g * g)
        m_hat = m / dt(1 - state.beta1 ** t)
        v_hat = v / dt(1 - state.beta2 ** t)
        p.data = p.data - dt(lr) * m_hat / (np.sqrt(v_hat) + dt(state.eps))
        state.m[name] = m
        state.v[name] = v


@dataclass(frozen=True)
class LrSchedule:
    """Multiply the base rate by ``factor`` at floor(total/2) and again at floor(3*total/4)."""

    total_epochs: int
    base_lr: float = 0.001
    factor: float = 0.75

    @property
    def milestones(self) -> tuple[int, int]:
        return self.total_epochs // 2, (3 * self.total_epochs) // 4


def lr_at_epoch(sched: LrSchedule, epoch: int) -> float:
    """Learning rate for a 0-based epoch index (constant within the epoch).

    Computed in decimal so 0.001 * 0.75**2 comes out as the double nearest
    0.0005625 rather than accumulating binary rounding.
    """
    if not 0 <= epoch < sched.total_epochs:
        raise EpochOutOfRangeError(f"epoch {epoch} outside [0, {sched.total_epochs})")
    k = sum(epoch >= m for m in sched.milestones)
    return float(Decimal(repr(sched.base_lr)) * Decimal(repr(sched.factor)) ** k)
