"""Row-wise top-k and column-wise capacity filtering of gate weights.

Selections are made on values with ties resolved toward the lower index
(expert index within a row, token index within a column).  Masks are
constants for the backward pass: kept entries pass gradient straight
through, dropped entries receive none.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .nncore import ContractError, Tensor, as_tensor, mul, record_decision


@dataclass(frozen=True)
class CapacitySpec:
    C: float
    N_plus_1: int
    k: int
    M: int

    def __post_init__(self):
        if self.C <= 0 or self.N_plus_1 < 1 or self.k < 1 or self.M < 1:
            raise ContractError(f"capacity fields must be positive: {self}")
        if self.k > self.M:
            raise ContractError(f"k={self.k} exceeds expert count M={self.M}")


@dataclass
class GateWeights:
    dense: Tensor
    sparse: Tensor
    k: int
    alpha: int | None = None
    row_mask: np.ndarray | None = None

    @property
    def mask(self) -> np.ndarray:
        return self.sparse.data != 0


def compute_alpha(spec: CapacitySpec) -> int:
    """Per-expert token budget ``max(1, floor(C * (N+1) * k / M))``."""
    # round to suppress float noise such as 1.1 * 10 = 11.000000000000002
    raw = round(spec.C * spec.N_plus_1 * spec.k / spec.M, 9)
    return max(1, math.floor(raw))


def top_k_mask(w: np.ndarray, k: int, axis: int = -1) -> np.ndarray:
    """Boolean mask of the ``k`` largest entries along ``axis``, lower index wins ties."""
    n = w.shape[axis]
    if k >= n:
        return np.ones(w.shape, dtype=bool)
    # stable sort of the negated values puts the lower index first among equals
    order = np.argsort(-w, axis=axis, kind="stable")
    keep = np.take(order, np.arange(k), axis=axis)
    mask = np.zeros(w.shape, dtype=bool)
    np.put_along_axis(mask, keep, True, axis=axis)
    return mask


def top_r(w, k: int) -> Tensor:
    """Keep the ``k`` largest weights of every row (last axis); zero the rest."""
    w = as_tensor(w)
    M = w.shape[-1]
    if not 1 <= k <= M:
        raise ContractError(f"top_r needs 1 <= k <= {M}, got k={k}")
    mask = top_k_mask(w.data, k, axis=-1)
    record_decision(mask)
    return mul(w, mask)


def top_c(w, alpha: int) -> Tensor:
    """Keep the ``alpha`` largest weights of every column (axis -2); zero the rest."""
    w = as_tensor(w)
    if alpha < 1:
        raise ContractError(f"top_c needs alpha >= 1, got {alpha}")
    mask = top_k_mask(w.data, alpha, axis=-2)
    record_decision(mask)
    return mul(w, mask)


def route(dense, k: int, spec: CapacitySpec) -> GateWeights:
    """``sparse = top_c(top_r(dense, k), alpha)``; accepts ``[r, M]`` or batched ``[..., r, M]``."""
    dense = as_tensor(dense)
    if dense.shape[-1] != spec.M:
        raise ContractError(f"gate width {dense.shape[-1]} != M={spec.M}")
    alpha = compute_alpha(spec)
    sparse = top_c(top_r(dense, k), alpha)
    return GateWeights(dense=dense, sparse=sparse, k=k, alpha=alpha)

