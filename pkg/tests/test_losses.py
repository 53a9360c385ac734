import numpy as np
import pytest
from scipy.special import logsumexp

from fairmoe import nncore as nn
from fairmoe.losses import (
    LossWeights,
    SkipCounter,
    StackedGates,
    contrastive_loss,
    fol,
    l_distance,
    pair_similarities,
    sinkhorn_distance,
    total_loss,
    variance_term,
)

from oracles import exact_ot_1d

T = nn.Tensor


def sinkhorn_unrolled(u, v, epsilon=1e-3, iters=200, eps_start=1.0, anneal=0.5):
    """Same iteration built from autodiff primitives; reference for the fused op."""
    u, v = nn.as_tensor(u).reshape(-1), nn.as_tensor(v).reshape(-1)
    n, m = u.shape[0], v.shape[0]
    diff = u.reshape(n, 1) - v.reshape(1, m)
    cost = diff * diff
    log_a, log_b = -np.log(n), -np.log(m)
    e0 = max(eps_start, epsilon)
    n_anneal = int(iters * anneal)
    f, g = T(np.zeros((n, 1))), T(np.zeros((1, m)))
    for t in range(iters):
        eps = max(epsilon, e0 * (epsilon / e0) ** (t / max(n_anneal - 1, 1))) if t < n_anneal else epsilon
        f_new = nn.logsumexp((g - cost) * (1.0 / eps) + log_b, axis=1, keepdims=True) * (-eps)
        g_new = nn.logsumexp((f - cost) * (1.0 / eps) + log_a, axis=0, keepdims=True) * (-eps)
        f, g = (f + f_new) * 0.5, (g + g_new) * 0.5
    plan = nn.exp((f + g - cost) * (1.0 / epsilon) + (log_a + log_b))
    return (plan * cost).sum()


@pytest.mark.parametrize("n,m,eps,iters", [(3, 3, 1e-3, 200), (5, 2, 0.05, 40), (1, 4, 1e-2, 7), (6, 6, 1e-3, 500)])
def test_fused_sinkhorn_matches_unrolled(n, m, eps, iters):
    rng = np.random.default_rng(n * 10 + m)
    u, v = nn.parameter(rng.uniform(-1, 1, n)), nn.parameter(rng.uniform(-1, 1, m))
    fused = sinkhorn_distance(u, v, eps, iters)
    ref = sinkhorn_unrolled(u, v, eps, iters)
    assert fused.item() == pytest.approx(ref.item(), rel=1e-9, abs=1e-12)
    ga, gb = nn.backward(fused, [u, v]), nn.backward(ref, [u, v])
    for p in (u, v):
        np.testing.assert_allclose(ga[p], gb[p], rtol=1e-7, atol=1e-10)


def contrastive_reference(img, txt, scale):
    a = img / np.linalg.norm(img, axis=1, keepdims=True)
    b = txt / np.linalg.norm(txt, axis=1, keepdims=True)
    z = scale * a @ b.T
    li = -(np.diag(z) - logsumexp(z, axis=1)).mean()
    lt = -(np.diag(z) - logsumexp(z, axis=0)).mean()
    return (li + lt) / 2


def test_contrastive_matches_reference():
    rng = np.random.default_rng(0)
    img, txt = rng.normal(size=(6, 5)), rng.normal(size=(6, 5))
    got = contrastive_loss(img, txt, temperature=0.07).item()
    assert got == pytest.approx(contrastive_reference(img, txt, 1 / 0.07), rel=1e-12)
    got = contrastive_loss(img, txt, logit_scale=T(np.array(3.0))).item()
    assert got == pytest.approx(contrastive_reference(img, txt, 3.0), rel=1e-12)


def test_contrastive_gradients():
    rng = np.random.default_rng(1)
    img, txt = nn.parameter(rng.normal(size=(4, 3)), "img"), nn.parameter(rng.normal(size=(4, 3)), "txt")
    s = nn.parameter(np.array(2.0), "scale")
    rep = nn.finite_diff_check(lambda: contrastive_loss(img, txt, logit_scale=s), [img, txt, s], h=1e-5, tol=1e-6)
    assert rep.passed, rep.summary()


def test_contrastive_contracts():
    with pytest.raises(nn.ContractError):
        contrastive_loss(np.ones((1, 3)), np.ones((1, 3)), temperature=1.0)
    with pytest.raises(nn.ContractError):
        contrastive_loss(np.zeros((2, 3)), np.ones((2, 3)), temperature=1.0)
    with pytest.raises(nn.ContractError):
        contrastive_loss(np.ones((2, 3)), np.ones((2, 3)))


def test_pair_similarities():
    a = np.array([[1.0, 0.0], [1.0, 1.0]])
    b = np.array([[2.0, 0.0], [-1.0, 1.0]])
    np.testing.assert_allclose(pair_similarities(T(a), T(b)).data, [1.0, 0.0], atol=1e-15)


@pytest.mark.parametrize("n", [1, 2, 5, 8])
def test_sinkhorn_close_to_exact_ot(n):
    rng = np.random.default_rng(n)
    for _ in range(5):
        u, v = rng.uniform(-1, 1, n), rng.uniform(-1, 1, n)
        d = sinkhorn_distance(u, v, epsilon=1e-3, iters=500).item()
        assert abs(d - exact_ot_1d(u, v)) < 1e-2


def test_sinkhorn_symmetric_and_zero_on_identical():
    rng = np.random.default_rng(5)
    u, v = rng.normal(size=6) * 0.5, rng.normal(size=6) * 0.5
    assert abs(sinkhorn_distance(u, v).item() - sinkhorn_distance(v, u).item()) < 1e-10
    assert sinkhorn_distance(u, u).item() < 1e-6


def test_sinkhorn_unequal_sizes():
    # all mass of v sits at 0, so every plan is the product plan
    u = np.array([-1.0, 0.0, 1.0, 2.0])
    assert sinkhorn_distance(u, np.zeros(3)).item() == pytest.approx(np.mean(u**2), abs=1e-9)


def test_sinkhorn_gradient():
    rng = np.random.default_rng(2)
    u, v = nn.parameter(rng.uniform(-1, 1, 4), "u"), nn.parameter(rng.uniform(-1, 1, 3), "v")
    rep = nn.finite_diff_check(lambda: sinkhorn_distance(u, v, epsilon=0.05, iters=100), [u, v], h=1e-6, tol=1e-5)
    assert rep.passed, rep.summary()


def test_sinkhorn_contracts():
    with pytest.raises(nn.ContractError):
        sinkhorn_distance(np.zeros(0), np.zeros(2))
    with pytest.raises(nn.ContractError):
        sinkhorn_distance(np.array([np.nan]), np.zeros(2))
    with pytest.raises(nn.ContractError):
        sinkhorn_distance(np.zeros(2), np.zeros(2), epsilon=0)


def test_l_distance_sums_groups_and_skips_singletons():
    sims = np.array([0.1, 0.9, 0.2, 0.8, 0.5])
    groups = np.array([0, 0, 1, 1, 2])  # group 2 has one member
    want = sum(sinkhorn_distance(sims, sims[groups == g]).item() for g in (0, 1))
    assert l_distance(sims, groups).item() == pytest.approx(want, rel=1e-12)


def test_variance_term_hand_example():
    overall = T(np.array([[0.0, 1.0], [2.0, 1.0]]))  # population var: [1, 0]
    g0 = T(np.array([[0.0, 0.0], [0.0, 2.0]]))  # var [0, 1]
    g1 = T(np.array([[1.0, 1.0], [3.0, 1.0], [2.0, 1.0]]))  # var [2/3, 0]
    val = variance_term(StackedGates(overall, {0: g0, 1: g1})).item()
    assert val == pytest.approx((1 + 1) + (1 / 3) ** 2, rel=1e-14)


def test_variance_term_skips_short_stacks():
    overall = T(np.eye(3))
    c = SkipCounter()
    with pytest.warns(RuntimeWarning):
        val = variance_term(StackedGates(overall, {"a": T(np.ones((1, 3))), "b": T(np.eye(3))}), c)
    assert c.skipped == 1 and val.item() == 0.0


def test_stacked_gates_width_checked():
    with pytest.raises(nn.ContractError):
        StackedGates(T(np.ones((2, 3))), {0: T(np.ones((2, 4)))})


def _stacks(rng, rows=6, M=4):
    o = nn.parameter(rng.uniform(size=(rows, M)))
    return StackedGates(o, {0: nn.parameter(rng.uniform(size=(3, M))), 1: nn.parameter(rng.uniform(size=(4, M)))})


def test_fol_terms_and_mask():
    rng = np.random.default_rng(3)
    stacks = {t: _stacks(rng) for t in ("EI", "ET", "FI", "FT")}
    sims = rng.uniform(-1, 1, 6)
    groups = np.array([0, 0, 0, 1, 1, 1])
    w = LossWeights(lambda_dist=0.5)
    res = fol(stacks, sims, groups, w)
    assert list(res.terms) == ["F_EI", "F_ET", "F_FI", "F_FT", "L_distance"]
    assert res.terms["L_distance"].item() == pytest.approx(0.5 * l_distance(sims, groups).item())
    assert res.total.item() == pytest.approx(sum(res.values().values()))
    masked = fol(stacks, sims, groups, w, term_mask=("EI",), use_distance=False)
    assert masked.values()["F_ET"] == 0.0 and masked.values()["L_distance"] == 0.0
    assert masked.total.item() == pytest.approx(res.values()["F_EI"])


def test_fol_gradients():
    rng = np.random.default_rng(4)
    stacks = {t: _stacks(rng, rows=5, M=3) for t in ("EI", "FT")}
    sims = nn.parameter(rng.uniform(-1, 1, 5), "sims")
    groups = np.array([0, 1, 0, 1, 1])
    params = [sims] + [p for st in stacks.values() for p in [st.overall, *st.by_group.values()]]
    w = LossWeights(lambda_dist=1.0, sinkhorn_epsilon=0.05, sinkhorn_iters=60)
    rep = nn.finite_diff_check(lambda: fol(stacks, sims, groups, w).total, params, h=1e-6, tol=1e-5)
    assert rep.passed, rep.summary()


def test_total_loss_weighting():
    assert total_loss(T(np.array(1.0)), T(np.array(2.0)), LossWeights(lambda_fol=0.25)).item() == 1.5


def test_loss_weights_validated():
    with pytest.raises(nn.ContractError):
        LossWeights(lambda_fol=-1)
    with pytest.raises(nn.ContractError):
        LossWeights(sinkhorn_epsilon=0)
