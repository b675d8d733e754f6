"""Layer diversity: mean cosine-squared distance between adjacent backbone layers."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .fusion import LayerStates
from .tensor import DimensionError, NumericalError, Tensor


@dataclass
class DiversityReport:
    side: str
    distances: list[float]

    @property
    def mean(self) -> float:
        return float(np.mean(self.distances))

    @property
    def mean_cos2(self) -> float:
        return 1.0 - self.mean


def pair_distance(h_lo: Tensor, h_hi: Tensor, valid_mask: np.ndarray | None = None) -> Tensor:
    """Mean over valid positions of 1 - cos^2 between matching state vectors."""
    if h_lo.shape != h_hi.shape:
        raise DimensionError(f"pair_distance: shapes {h_lo.shape} and {h_hi.shape} differ")
    valid = np.ones(h_lo.shape[:-1], bool) if valid_mask is None else np.asarray(valid_mask, bool)
    if not valid.any():
        raise NumericalError("pair_distance needs at least one valid position")
    # padded rows may be anything, including zero; only valid rows are compared
    if valid.all():
        d = h_lo.shape[-1]
        lo, hi = T.reshape(h_lo, (-1, d)), T.reshape(h_hi, (-1, d))
    else:
        idx = np.nonzero(valid)
        lo, hi = T.getitem(h_lo, idx), T.getitem(h_hi, idx)
    cos2 = T.cosine_squared_rows(lo, hi)
    return T.scale(T.mean(cos2, axis=0), -1.0) + 1.0


def diversity_loss(states: LayerStates | list[Tensor], valid_mask: np.ndarray | None = None) -> Tensor:
    """Average pair distance over adjacent backbone layers H^1..H^L (H^0 and aggregation nodes excluded)."""
    backbone = states.backbone if isinstance(states, LayerStates) else states
    layers = backbone[1:]
    if len(layers) < 2:
        raise ValueError("diversity needs at least two backbone layers")
    dists = [pair_distance(layers[i], layers[i + 1], valid_mask) for i in range(len(layers) - 1)]
    return T.scale(T.add_n(dists), 1.0 / len(dists))


def diversity_report(states: LayerStates, valid_mask: np.ndarray | None, side: str) -> DiversityReport:
    with T.no_grad():
        layers = states.backbone[1:]
        dists = [pair_distance(layers[i], layers[i + 1], valid_mask).item() for i in range(len(layers) - 1)]
    return DiversityReport(side, dists)


def total_loss(nll: Tensor, div_enc: Tensor | None, div_dec: Tensor | None, lam: float) -> Tensor:
    """nll - lam * mean(div_enc, div_dec): minimizing it rewards diverse layers."""
    if lam < 0:
        raise ValueError("lambda must be nonnegative")
    if lam == 0:
        return nll
    terms = [t for t in (div_enc, div_dec) if t is not None]
    if not terms:
        raise ValueError("lambda > 0 but no diversity terms supplied")
    return nll - T.scale(T.add_n(terms), lam / len(terms))
