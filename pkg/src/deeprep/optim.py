"""Adam with linear warmup followed by inverse-square-root decay."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import NumericalError, Tensor


@dataclass(frozen=True)
class AdamHyper:
    peak_lr: float = 3e-3
    warmup: int = 400
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9


@dataclass
class OptimState:
    hyper: AdamHyper
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def learning_rate(step: int, hyper: AdamHyper) -> float:
    """peak_lr * sqrt(warmup) * min(step^-0.5, step * warmup^-1.5); peaks at step == warmup."""
    if step < 1:
        return 0.0
    w = hyper.warmup
    return hyper.peak_lr * math.sqrt(w) * min(step ** -0.5, step * w ** -1.5)


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: OptimState) -> OptimState:
    """Apply one Adam update in place. Parameters without a gradient are skipped."""
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient in parameter {name!r}")
    h = state.hyper
    state.step += 1
    t = state.step
    lr = learning_rate(t, h)
    c1 = 1.0 - h.beta1 ** t
    c2 = 1.0 - h.beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= h.beta1
        m += (1.0 - h.beta1) * g
        v *= h.beta2
        v += (1.0 - h.beta2) * (g * g)
        update = (lr / c1) * m / (np.sqrt(v / c2) + h.eps)
        p.data = p.data - update.astype(p.data.dtype)
    return state
