"""Adam with bias correction and an inverse-square-root warmup schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import NonFiniteError, Tensor

__all__ = ["AdamState", "adam_step", "lr_schedule"]


@dataclass
class AdamState:
    """Per-parameter first/second moment estimates plus the shared step count.

    Moments are keyed by parameter name so a state survives checkpointing and
    partial warm starts: parameters absent from the dicts simply start fresh.
    """

    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], state: AdamState, lr: float) -> None:
    """One in-place Adam update from the .grad fields; grads are then cleared.

    Rejects the whole step if any gradient is non-finite: a single NaN would
    otherwise poison the moments and every later update.
    """
    for name, p in params.items():
        if p.grad is None:
            raise ValueError(f"parameter '{name}' has no gradient; run backward first")
        if not np.all(np.isfinite(p.grad)):
            raise NonFiniteError(f"non-finite gradient for parameter '{name}'")

    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for name, p in params.items():
        g = p.grad.astype(p.data.dtype, copy=False)
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        else:
            v = state.v[name]
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * (g * g)
        state.m[name] = m
        state.v[name] = v
        mhat = m / bc1
        vhat = v / bc2
        p.data = p.data - lr * mhat / (np.sqrt(vhat) + state.eps)
        p.grad = None


def lr_schedule(step: int, peak_lr: float = 3.5e-4, warmup_steps: int = 8000) -> float:
    """Linear warmup to peak_lr, then inverse-square-root decay.

    Continuous at the warmup boundary: both branches equal peak_lr at
    step == warmup_steps.  step counts from 1.
    """
    if step < 1:
        raise ValueError(f"step counts from 1, got {step}")
    return peak_lr * min(step / warmup_steps, math.sqrt(warmup_steps / step))
