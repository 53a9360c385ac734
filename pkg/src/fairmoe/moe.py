"""Embedding-level and feature-level mixture-of-experts layers.

Both layers evaluate every expert densely and combine the outputs with the
(sparse) gate weights, so a zero weight removes an expert's contribution
exactly.  Inputs may carry leading batch dimensions.
"""

from __future__ import annotations

import numpy as np

from . import nncore as nn
from .nncore import ContractError, DimensionError, Module, Tensor
from .routing import CapacitySpec, GateWeights, route, top_r


class Expert(Module):
    """Two-layer MLP ``E(x) = T act(W x)`` without biases."""

    def __init__(self, rng: np.random.Generator, d_in: int, d_hidden: int, d_out: int, activation: str = "gelu"):
        if activation not in nn.ACTIVATIONS:
            raise ContractError(f"unknown activation {activation!r}")
        self.w_in = nn.init_weight(rng, (d_hidden, d_in))
        self.w_out = nn.init_weight(rng, (d_out, d_hidden))
        self.activation = activation

    def __call__(self, x: Tensor) -> Tensor:
        act = nn.ACTIVATIONS[self.activation]
        return nn.bmm(act(nn.bmm(x, self.w_in.T)), self.w_out.T)


def _all_experts(experts: list[Expert], x: Tensor) -> Tensor:
    """Stack expert outputs: ``x [..., T, D] -> [..., M, T, D_out]``."""
    w_in = nn.stack([e.w_in.T for e in experts])  # [M, D, H]
    w_out = nn.stack([e.w_out.T for e in experts])  # [M, H, D_out]
    act = nn.ACTIVATIONS[experts[0].activation]
    xe = x.reshape(x.shape[:-2] + (1,) + x.shape[-2:])
    return nn.bmm(act(nn.bmm(xe, w_in)), w_out)


def _combine(outputs: Tensor, weights: Tensor) -> Tensor:
    """``sum_b weights[..., t, b] * outputs[..., b, t, :]``."""
    w = nn.swapaxes(weights, -1, -2)
    w = w.reshape(w.shape + (1,))
    return (outputs * w).sum(axis=-3)


class EmbeddingMoE(Module):
    """Per-token expert mixture with top-k and capacity filtering."""

    def __init__(
        self,
        rng: np.random.Generator,
        dim: int,
        num_experts: int,
        k: int,
        capacity: float,
        num_tokens: int,
        hidden: int | None = None,
        d_out: int | None = None,
        activation: str = "gelu",
    ):
        hidden = hidden or 4 * dim
        d_out = d_out or dim
        self.experts = [Expert(rng, dim, hidden, d_out, activation) for _ in range(num_experts)]
        self.gate = nn.init_weight(rng, (dim, num_experts))
        self.k = k
        self.capacity = CapacitySpec(C=capacity, N_plus_1=num_tokens, k=k, M=num_experts)
        self.dim = dim

    @property
    def num_experts(self) -> int:
        return len(self.experts)

    def gate_probs(self, x: Tensor) -> Tensor:
        return nn.softmax(nn.bmm(x, self.gate), axis=-1)

    def __call__(self, x: Tensor, token_mask: np.ndarray | None = None) -> tuple[Tensor, GateWeights]:
        """``x [..., N+1, D] -> [..., N+1, D_out]`` plus the gate record.

        Rows where ``token_mask`` is False (padding) get zero gate weight
        before routing, so they never consume expert capacity.
        """
        if x.ndim < 2 or x.shape[-1] != self.dim:
            raise DimensionError(f"expected [..., N+1, {self.dim}], got {x.shape}")
        if x.shape[-2] != self.capacity.N_plus_1:
            raise DimensionError(f"token count {x.shape[-2]} != capacity N+1={self.capacity.N_plus_1}")
        probs = self.gate_probs(x)
        if token_mask is not None:
            token_mask = np.broadcast_to(np.asarray(token_mask, dtype=bool), x.shape[:-1])
            probs = probs * token_mask[..., None]
        gates = route(probs, self.k, self.capacity)
        gates.row_mask = token_mask
        return _combine(_all_experts(self.experts, x), gates.sparse), gates


class FeatureMoE(Module):
    """Expert mixture on the position-0 vector; top-k gating, no capacity."""

    def __init__(
        self,
        rng: np.random.Generator,
        dim: int,
        d_out: int,
        num_experts: int,
        k: int,
        hidden: int | None = None,
        activation: str = "gelu",
    ):
        hidden = hidden or 4 * dim
        self.experts = [Expert(rng, dim, hidden, d_out, activation) for _ in range(num_experts)]
        self.gate = nn.init_weight(rng, (dim, num_experts))
        self.k = k
        self.dim = dim

    def __call__(self, x: Tensor) -> tuple[Tensor, GateWeights]:
        """``x [..., N+1, D] -> feature [..., D_out]`` plus gates ``[..., M]``.

        An unbatched ``[N+1, D]`` input yields a ``[D_out]`` feature and a
        ``[1, M]`` gate matrix.
        """
        if x.ndim < 2 or x.shape[-2] == 0:
            raise ContractError("feature MoE needs at least one token row")
        if x.shape[-1] != self.dim:
            raise DimensionError(f"expected width {self.dim}, got {x.shape[-1]}")
        single = x.ndim == 2
        first = x[..., 0:1, :]  # [..., 1, D]
        dense = nn.softmax(nn.bmm(first, self.gate), axis=-1)  # [..., 1, M]
        sparse = top_r(dense, self.k)
        out = _combine(_all_experts(self.experts, first), sparse)  # [..., 1, D_out]
        feat = out.reshape(out.shape[:-2] + out.shape[-1:])
        if single:
            return feat, GateWeights(dense=dense, sparse=sparse, k=self.k)
        lead = dense.shape[:-2] + dense.shape[-1:]
        return feat, GateWeights(dense=dense.reshape(lead), sparse=sparse.reshape(lead), k=self.k)


class FeedForward(Module):
    """Dense two-layer MLP with biases, the non-MoE block filler."""

    def __init__(self, rng: np.random.Generator, dim: int, hidden: int | None = None, activation: str = "gelu"):
        hidden = hidden or 4 * dim
        self.fc1 = nn.Linear(rng, dim, hidden)
        self.fc2 = nn.Linear(rng, hidden, dim)
        self.activation = activation

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(nn.ACTIVATIONS[self.activation](self.fc1(x)))


class FeatureProjection(Module):
    """Linear stand-in for the feature MoE when that layer is ablated."""

    def __init__(self, rng: np.random.Generator, dim: int, d_out: int):
        self.proj = nn.Linear(rng, dim, d_out, bias=False)

    def __call__(self, x: Tensor) -> tuple[Tensor, None]:
        return self.proj(x[..., 0, :]), None
