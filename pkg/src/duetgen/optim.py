"""AdamW, the warmup learning-rate schedule, and the finite-difference oracle."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .params import ParameterSet
from .tensor import NumericsError


@dataclass
class LrSchedule:
    """Linear ramp from 0 to peak over the warmup span, then constant peak."""

    peak_lr: float
    total_steps: int
    warmup_fraction: float = 0.03

    def __post_init__(self):
        if not (0.0 < self.warmup_fraction < 1.0):
            raise ValueError("warmup_fraction must be in (0,1)")
        if self.peak_lr <= 0 or self.total_steps <= 0:
            raise ValueError("peak_lr and total_steps must be positive")

    @property
    def warmup_steps(self) -> int:
        return max(1, math.ceil(self.warmup_fraction * self.total_steps))

    def lr_at(self, step: int) -> float:
        if step < 0:
            raise ValueError("step must be non-negative")
        w = self.warmup_steps
        if step >= w:
            return self.peak_lr
        return self.peak_lr * step / w


def lr_at(schedule: LrSchedule, step: int) -> float:
    return schedule.lr_at(step)


@dataclass
class OptimizerState:
    """Per-parameter AdamW moments plus the shared step counter."""

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    @classmethod
    def for_params(cls, params: ParameterSet) -> "OptimizerState":
        state = cls()
        for name, t in params.items():
            state.m[name] = np.zeros_like(t.data)
            state.v[name] = np.zeros_like(t.data)
        return state


def adamw_step(
    params: ParameterSet,
    grads: dict[str, np.ndarray],
    state: OptimizerState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> None:
    """Decoupled-weight-decay Adam update, in place, step counter + 1."""
    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.data.shape:
            raise ValueError(f"gradient shape mismatch for {name}: {g.shape} vs {p.data.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericsError(f"non-finite gradient for {name}")
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        if weight_decay:
            p.data *= 1.0 - lr * weight_decay
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most max_norm; returns the pre-clip norm."""
    total = 0.0
    for g in grads.values():
        total += float(np.sum(g.astype(np.float64) ** 2))
    norm = math.sqrt(total)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


def finite_diff_gradient(
    f: Callable[[ParameterSet], float],
    params: ParameterSet,
    eps: float = 1e-5,
    coords: dict[str, np.ndarray] | None = None,
) -> dict[str, np.ndarray]:
    """Central-difference gradient oracle: (f(th+eps e) - f(th-eps e)) / 2 eps.

    `f` must be pure and deterministic.  When `coords` maps a parameter name
    to an array of flat indices, only those coordinates are probed and the
    remaining entries stay zero (keeps oracle runtime bounded on big losses).
    """
    if not (1e-8 <= eps <= 1e-2):
        raise ValueError(f"eps {eps} outside sane range [1e-8, 1e-2]")
    out: dict[str, np.ndarray] = {}
    for name, p in params.items():
        flat = p.data.reshape(-1)
        grad = np.zeros_like(flat)
        idxs = range(flat.size) if coords is None else coords.get(name, np.empty(0, dtype=int))
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + eps
            hi = f(params)
            flat[i] = orig - eps
            lo = f(params)
            flat[i] = orig
            grad[i] = (hi - lo) / (2.0 * eps)
        out[name] = grad.reshape(p.data.shape)
    return out
