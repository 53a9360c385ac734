"""Training objectives: CLIP contrastive loss, Sinkhorn distance, gate-variance terms, FOL."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import nncore as nn
from .nncore import ContractError, Tensor

TERMS = ("EI", "ET", "FI", "FT")


@dataclass
class LossWeights:
    lambda_fol: float = 1.0
    lambda_dist: float = 1e-4
    sinkhorn_epsilon: float = 1e-3
    sinkhorn_iters: int = 200

    def __post_init__(self):
        if self.lambda_fol < 0 or self.lambda_dist < 0:
            raise ContractError("loss weights must be non-negative")
        if self.sinkhorn_epsilon <= 0 or self.sinkhorn_iters < 1:
            raise ContractError("sinkhorn needs epsilon > 0 and iters >= 1")


@dataclass
class StackedGates:
    """Gate-weight rows from a whole-data sample and from each protected group."""

    overall: Tensor  # [R, M]
    by_group: dict = field(default_factory=dict)  # group -> Tensor [R_p, M]

    def __post_init__(self):
        M = self.overall.shape[-1]
        for g, t in self.by_group.items():
            if t.shape[-1] != M:
                raise ContractError(f"group {g!r} stack has {t.shape[-1]} columns, expected {M}")


# ---------------------------------------------------------------------------
# contrastive
# ---------------------------------------------------------------------------


def contrastive_loss(img_feats, txt_feats, temperature=None, logit_scale=None) -> Tensor:
    """Symmetric InfoNCE over the cosine-similarity matrix.

    Pass either a positive ``temperature`` or a ``logit_scale`` tensor that
    multiplies the similarities (``1 / temperature``).
    """
    img, txt = nn.as_tensor(img_feats), nn.as_tensor(txt_feats)
    if img.shape != txt.shape or img.ndim != 2:
        raise ContractError(f"feature batches must share shape [B, D], got {img.shape} and {txt.shape}")
    B = img.shape[0]
    if B < 2:
        raise ContractError("contrastive loss needs B >= 2")
    for name, f in (("image", img), ("text", txt)):
        if np.any(np.linalg.norm(f.data, axis=1) == 0):
            raise ContractError(f"zero-norm {name} feature")
    if (temperature is None) == (logit_scale is None):
        raise ContractError("give exactly one of temperature or logit_scale")
    sim = nn.bmm(nn.l2_normalize(img), nn.l2_normalize(txt).T)
    logits = sim * logit_scale if logit_scale is not None else sim * (1.0 / temperature)
    diag = (np.arange(B), np.arange(B))
    ce_i = -nn.log_softmax(logits, axis=1)[diag].mean()
    ce_t = -nn.log_softmax(logits, axis=0)[diag].mean()
    return (ce_i + ce_t) * 0.5


def pair_similarities(img_feats: Tensor, txt_feats: Tensor) -> Tensor:
    """Cosine similarity of each matched image/text pair, shape ``[B]``."""
    return (nn.l2_normalize(img_feats) * nn.l2_normalize(txt_feats)).sum(axis=-1)


# ---------------------------------------------------------------------------
# Sinkhorn
# ---------------------------------------------------------------------------


def _eps_schedule(epsilon: float, iters: int, eps_start: float, anneal: float) -> np.ndarray:
    e0 = max(eps_start, epsilon)
    n_anneal = int(iters * anneal)
    t = np.arange(iters)
    decay = e0 * (epsilon / e0) ** (t / max(n_anneal - 1, 1))
    return np.where(t < n_anneal, np.maximum(epsilon, decay), epsilon)


def _lse(a: np.ndarray, axis: int) -> tuple[np.ndarray, np.ndarray]:
    """Log-sum-exp along ``axis`` (kept) and the matching softmax."""
    m = a.max(axis=axis, keepdims=True)
    e = np.exp(a - m)
    s = e.sum(axis=axis, keepdims=True)
    return m + np.log(s), e / s


def sinkhorn_distance(
    u, v, epsilon: float = 1e-3, iters: int = 200, eps_start: float = 1.0, anneal: float = 0.5
) -> Tensor:
    """Entropic OT cost between two uniform empirical measures on the real line.

    Cost ``|x - y|^2``.  Runs ``iters`` log-domain Sinkhorn iterations with
    symmetric (averaged) dual updates; over the first ``anneal`` fraction of
    iterations the regularisation decays geometrically from ``eps_start`` to
    ``epsilon``.  Returns ``<P, C>`` for the final plan at ``epsilon``.

    The iterations run in plain numpy and the backward pass differentiates
    through every one of them (reverse sweep over the stored potentials), so
    the gradient is exact for this fixed-iteration map.

    ``eps_start`` should be on the order of the largest cost; the default
    suits supports of unit scale such as cosine similarities.
    """
    u, v = nn.as_tensor(u).reshape(-1), nn.as_tensor(v).reshape(-1)
    n, m = u.shape[0], v.shape[0]
    if n < 1 or m < 1:
        raise ContractError("sinkhorn needs non-empty samples")
    if epsilon <= 0 or iters < 1:
        raise ContractError("sinkhorn needs epsilon > 0 and iters >= 1")
    if not (np.all(np.isfinite(u.data)) and np.all(np.isfinite(v.data))):
        raise ContractError("non-finite sample values")
    diff = u.data[:, None] - v.data[None, :]
    cost = diff * diff
    log_a, log_b = -np.log(n), -np.log(m)
    sched = _eps_schedule(epsilon, iters, eps_start, anneal)
    # potentials are in cost units: P_ij = a_i b_j exp((f_i + g_j - C_ij) / eps)
    f, g = np.zeros((n, 1)), np.zeros((1, m))
    hist = []
    for eps in sched:
        hist.append((f, g))
        lf, _ = _lse((g - cost) / eps + log_b, axis=1)
        lg, _ = _lse((f - cost) / eps + log_a, axis=0)
        f, g = (f - eps * lf) * 0.5, (g - eps * lg) * 0.5
    plan = np.exp((f + g - cost) / epsilon + (log_a + log_b))
    value = float((plan * cost).sum())

    def grad_fn(gout):
        gout = float(gout)
        pc = plan * cost / epsilon
        c_bar = gout * (plan - pc)
        f_bar = gout * pc.sum(axis=1, keepdims=True)
        g_bar = gout * pc.sum(axis=0, keepdims=True)
        for eps, (f0, g0) in zip(sched[::-1], hist[::-1]):
            _, S = _lse((g0 - cost) / eps + log_b, axis=1)  # d f_new / d g = -S
            _, R = _lse((f0 - cost) / eps + log_a, axis=0)  # d g_new / d f = -R
            fn_bar, gn_bar = f_bar * 0.5, g_bar * 0.5
            c_bar = c_bar + fn_bar * S + gn_bar * R
            f_bar, g_bar = f_bar * 0.5 - (R * gn_bar).sum(axis=1, keepdims=True), g_bar * 0.5 - (S * fn_bar).sum(axis=0, keepdims=True)
        d = 2.0 * c_bar * diff
        return d.sum(axis=1), -d.sum(axis=0)

    return nn._make(np.array(value), (u, v), grad_fn)


def l_distance(similarities, groups, epsilon: float = 1e-3, iters: int = 200) -> Tensor:
    """Sum over groups (with >= 2 members) of the Sinkhorn distance between all
    similarities and the group's similarities."""
    sims = nn.as_tensor(similarities).reshape(-1)
    groups = np.asarray(groups)
    if sims.shape[0] < 2:
        raise ContractError("l_distance needs at least two similarities")
    if groups.shape[0] != sims.shape[0]:
        raise ContractError("groups and similarities differ in length")
    total = nn.Tensor(0.0)
    for p in np.unique(groups):
        idx = np.flatnonzero(groups == p)
        if len(idx) < 2:
            continue
        total = total + sinkhorn_distance(sims, sims[idx], epsilon, iters)
    return total


# ---------------------------------------------------------------------------
# variance terms and FOL
# ---------------------------------------------------------------------------


@dataclass
class SkipCounter:
    skipped: int = 0


def variance_term(stacks: StackedGates, counter: SkipCounter | None = None) -> Tensor:
    """``sum_p sum_j (Var(O[:, j]) - Var(O_p[:, j]))^2`` with population variances."""
    if stacks.overall.shape[0] < 2:
        raise ContractError("whole-data stack needs at least two rows")
    var_all = nn.variance(stacks.overall, axis=0)
    total = nn.Tensor(0.0)
    for g in sorted(stacks.by_group, key=str):
        t = stacks.by_group[g]
        if t.shape[0] < 2:
            if counter is not None:
                counter.skipped += 1
            warnings.warn(f"group {g!r} stack has fewer than 2 rows; skipped", RuntimeWarning, stacklevel=2)
            continue
        d = var_all - nn.variance(t, axis=0)
        total = total + (d * d).sum()
    return total


@dataclass
class FOLResult:
    terms: dict  # name -> Tensor, names in TERMS plus "L_distance"
    total: Tensor

    def values(self) -> dict[str, float]:
        return {k: float(v.data) for k, v in self.terms.items()}


def fol(
    all_stacks: Mapping[str, StackedGates | None],
    similarities=None,
    groups=None,
    weights: LossWeights | None = None,
    term_mask: Sequence[str] = TERMS,
    use_distance: bool = True,
) -> FOLResult:
    """``F_EI + F_ET + F_FI + F_FT + L_distance``; each piece is returned too.

    Terms missing from ``all_stacks``, set to None, or outside ``term_mask``
    contribute zero.  ``L_distance`` is scaled by ``weights.lambda_dist``.
    """
    weights = weights or LossWeights()
    terms: dict[str, Tensor] = {}
    for name in TERMS:
        st = all_stacks.get(name)
        terms[f"F_{name}"] = variance_term(st) if (st is not None and name in term_mask) else nn.Tensor(0.0)
    if use_distance and similarities is not None:
        dist = l_distance(similarities, groups, weights.sinkhorn_epsilon, weights.sinkhorn_iters)
        terms["L_distance"] = dist * weights.lambda_dist
    else:
        terms["L_distance"] = nn.Tensor(0.0)
    total = nn.Tensor(0.0)
    for v in terms.values():
        total = total + v
    return FOLResult(terms, total)


def total_loss(contrastive, fol_value, w: LossWeights) -> Tensor:
    return nn.as_tensor(contrastive) + nn.as_tensor(fol_value) * w.lambda_fol
