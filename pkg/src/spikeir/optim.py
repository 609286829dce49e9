"""AdamW with decoupled weight decay and a cosine learning-rate schedule."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError, NumericError
from .tensor import TensorRec


@dataclass
class OptimState:
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.05
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(params: dict[str, TensorRec], grads: dict[str, np.ndarray],
               state: OptimState, lr: float) -> None:
    """One AdamW update in place, with bias correction.

    Parameters missing from ``grads`` are treated as having a zero gradient,
    so weight decay still applies to them.
    """
    if not lr > 0:
        raise ConfigError(f"learning rate must be positive, got {lr}")
    for name, g in grads.items():
        if name not in params:
            raise ContractError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise ContractError(f"gradient shape {g.shape} != {params[name].shape} for {name}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name}")
    state.step += 1
    t = state.step
    b1, b2 = np.float32(state.beta1), np.float32(state.beta2)
    corr1 = np.float32(1.0 - state.beta1 ** t)
    corr2 = np.float32(1.0 - state.beta2 ** t)
    lr32 = np.float32(lr)
    decay = np.float32(1.0 - lr * state.weight_decay)
    eps = np.float32(state.eps)
    for name, p in params.items():
        w = p.data
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(w)
        g = g.astype(w.dtype, copy=False)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(w)
            state.v[name] = np.zeros_like(w)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        w *= decay
        w -= lr32 * (m / corr1) / (np.sqrt(v / corr2) + eps)


@dataclass(frozen=True)
class CosineSchedule:
    total_epochs: int
    lr_max: float = 5e-4
    lr_min: float = 1e-5


def lr_at(schedule: CosineSchedule, epoch: int) -> float:
    """Cosine-annealed rate that hits ``lr_max`` at epoch 0 and ``lr_min`` at the last."""
    n = schedule.total_epochs
    if not 0 <= epoch < n:
        raise ConfigError(f"epoch {epoch} outside [0, {n})")
    if n == 1:
        return schedule.lr_max
    frac = epoch / (n - 1)
    return schedule.lr_min + 0.5 * (schedule.lr_max - schedule.lr_min) * (1 + math.cos(math.pi * frac))
