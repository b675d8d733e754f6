"""Central-difference verification of reverse-mode gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

DENOM_FLOOR = 1e-8
# absolute slack that covers rounding of a 64-bit loss differenced at eps=1e-5 (about 2e-11)
ROUNDOFF_ATOL = 1e-9


class GradCheckFailure(AssertionError):
    """``roundoff_only`` is true when every offending entry agrees within ``ROUNDOFF_ATOL``."""

    def __init__(self, message: str, error: float, roundoff_only: bool = False,
                 errors: dict | None = None):
        super().__init__(message)
        self.error = error
        self.roundoff_only = roundoff_only
        self.errors = errors or {}


def within_roundoff(analytic: np.ndarray, numeric: np.ndarray, tol: float) -> bool:
    """Relative agreement to ``tol`` or absolute agreement to ``ROUNDOFF_ATOL``, entrywise."""
    diff = np.abs(analytic - numeric)
    return bool(np.all(diff <= tol * np.maximum(np.abs(analytic), np.abs(numeric)) + ROUNDOFF_ATOL))


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), DENOM_FLOOR)
    return np.abs(analytic - numeric) / denom


def numeric_grad(f: Callable[[], Tensor], p: Tensor, eps: float) -> np.ndarray:
    """(f(p + eps) - f(p - eps)) / 2eps for every entry of ``p``, evaluated in place."""
    out = np.zeros(p.shape, dtype=np.float64)
    flat = p.data.reshape(-1)
    if not np.shares_memory(flat, p.data):
        raise ValueError("parameter storage must be contiguous for in-place perturbation")
    with T.no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = f().item()
            flat[i] = orig - eps
            down = f().item()
            flat[i] = orig
            out.reshape(-1)[i] = (up - down) / (2 * eps)
    return out


def numeric_grad_components(f: Callable[[], np.ndarray], p: Tensor, eps: float) -> np.ndarray:
    """Central differences of a vector-valued ``f`` for every entry of ``p``.

    Returns shape ``[n_components, *p.shape]``.
    """
    flat = p.data.reshape(-1)
    if not np.shares_memory(flat, p.data):
        raise ValueError("parameter storage must be contiguous for in-place perturbation")
    cols = []
    with T.no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = np.asarray(f(), dtype=np.float64)
            flat[i] = orig - eps
            down = np.asarray(f(), dtype=np.float64)
            flat[i] = orig
            cols.append((up - down) / (2 * eps))
    if not cols:
        return np.zeros((0,) + p.shape)
    return np.stack(cols, axis=-1).reshape((-1,) + p.shape)


def grad_check_report(f: Callable[[], Tensor], params: Sequence[Tensor],
                      eps: float = 1e-5) -> tuple[float, dict[str, float]]:
    """Worst relative error overall and per parameter (keyed by name or position)."""
    for p in params:
        if p.data.dtype != np.float64:
            raise ValueError("gradient checks require 64-bit parameters")
    for p in params:
        p.grad = None
    loss = f()
    if loss.requires_grad:
        loss.backward()
    per: dict[str, float] = {}
    for i, p in enumerate(params):
        analytic = np.zeros(p.shape) if p.grad is None else p.grad
        err = relative_error(analytic, numeric_grad(f, p, eps))
        per[p.name or str(i)] = float(err.max()) if err.size else 0.0
    return (max(per.values()) if per else 0.0), per


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-5) -> float:
    """Maximum elementwise relative error between autodiff and central differences.

    The denominator is ``max(|analytic|, |numeric|, 1e-8)``.
    """
    return grad_check_report(f, params, eps)[0]
