"""Adaptive-moment optimizer with decoupled weight decay."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from ..errors import ConfigurationError

BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-8
WEIGHT_DECAY = 0.01


@dataclass
class OptState:
    step: int = 0
    exp_avg: dict = field(default_factory=dict)
    exp_avg_sq: dict = field(default_factory=dict)


def adamw_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray],
               state: OptState, lr: float, beta1: float = BETA1, beta2: float = BETA2,
               eps: float = EPS, weight_decay: float = WEIGHT_DECAY,
               no_decay: frozenset = frozenset()) -> OptState:
    """Update ``params`` in place and advance ``state``.

    Only entries present in ``grads`` move, including their weight decay;
    names listed in ``no_decay`` skip the decay term.
    """
    if not lr > 0:
        raise ConfigurationError(f"learning rate must be positive, got {lr}")
    unknown = set(grads) - set(params)
    if unknown:
        raise ConfigurationError(f"gradients for unknown parameters: {sorted(unknown)}")
    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    step_size = lr / bc1
    for name, g in grads.items():
        p = params[name]
        m = state.exp_avg.get(name)
        if m is None:
            m = state.exp_avg[name] = np.zeros_like(p)
            state.exp_avg_sq[name] = np.zeros_like(p)
        v = state.exp_avg_sq[name]
        if weight_decay and name not in no_decay:
            p *= 1.0 - lr * weight_decay
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        denom = np.sqrt(v) / np.sqrt(bc2) + eps
        p -= step_size * m / denom
    return state


def adam_step(params, grads, state: OptState, lr: float, **kw) -> OptState:
    """Plain Adam: the same update without weight decay."""
    kw["weight_decay"] = 0.0
    return adamw_step(params, grads, state, lr, **kw)


def exponential_lr(start: float, end: float, index: int, total: int) -> float:
    """Geometric interpolation from ``start`` (index 0) to ``end`` (index total-1)."""
    if total <= 1:
        return start
    return start * (end / start) ** (index / (total - 1))
