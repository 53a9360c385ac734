import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fairmoe import nncore as nn
from fairmoe.routing import CapacitySpec, compute_alpha, route, top_c, top_k_mask, top_r

from oracles import alpha_oracle, route_oracle


def _softmax(z):
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def test_alpha_examples():
    assert compute_alpha(CapacitySpec(1.0, 10, 2, 4)) == 5
    assert compute_alpha(CapacitySpec(0.1, 3, 1, 16)) == 1  # floor 0 -> clamped
    assert compute_alpha(CapacitySpec(1.1, 10, 1, 1)) == 11  # 11.000000000000002 in floats
    assert compute_alpha(CapacitySpec(1.25, 17, 2, 4)) == 10


@given(
    C=st.sampled_from([0.05, 0.1, 0.25, 0.5, 0.75, 1.0, 1.1, 1.25, 1.5, 2.0, 3.3]),
    n=st.integers(1, 64),
    M=st.integers(1, 16),
    data=st.data(),
)
def test_alpha_matches_rational_floor(C, n, M, data):
    k = data.draw(st.integers(1, M))
    assert compute_alpha(CapacitySpec(C, n, k, M)) == alpha_oracle(C, n, k, M)


def test_capacity_spec_rejects_bad_fields():
    with pytest.raises(nn.ContractError):
        CapacitySpec(1.0, 4, 5, 4)
    with pytest.raises(nn.ContractError):
        CapacitySpec(0.0, 4, 1, 4)


def test_worked_example():
    # r=3 tokens, M=2 experts, k=1, alpha = floor(1 * 3 * 1 / 2) = 1
    w = np.array([[0.6, 0.4], [0.7, 0.3], [0.2, 0.8]])
    g = route(w, 1, CapacitySpec(1.0, 3, 1, 2))
    assert g.alpha == 1
    # expert 0: tokens 0 and 1 want it, token 1 wins; token 0 is dropped entirely
    np.testing.assert_array_equal(g.sparse.data, [[0, 0], [0.7, 0], [0, 0.8]])


def test_ties_go_to_lower_index():
    w = np.full((3, 4), 0.25)
    out = top_r(w, 2).data
    np.testing.assert_array_equal(out != 0, [[1, 1, 0, 0]] * 3)
    out = top_c(out, 2).data
    np.testing.assert_array_equal(out != 0, [[1, 1, 0, 0], [1, 1, 0, 0], [0, 0, 0, 0]])


def test_top_r_range_checked():
    with pytest.raises(nn.ContractError):
        top_r(np.ones((2, 3)), 0)
    with pytest.raises(nn.ContractError):
        top_r(np.ones((2, 3)), 4)
    with pytest.raises(nn.ContractError):
        top_c(np.ones((2, 3)), 0)


def test_route_checks_width():
    with pytest.raises(nn.ContractError):
        route(np.ones((2, 3)), 1, CapacitySpec(1.0, 2, 1, 4))


def test_route_matches_oracle_random():
    rng = np.random.default_rng(7)
    for _ in range(200):
        r, M = rng.integers(1, 33), rng.integers(1, 17)
        k = rng.integers(1, M + 1)
        C = rng.choice([0.25, 0.5, 1.0, 1.5, 2.0])
        w = _softmax(rng.normal(size=(r, M)))
        if rng.random() < 0.5:
            w = np.round(w * 4) / 4  # force ties
        spec = CapacitySpec(C, int(r), int(k), int(M))
        out = route(w, int(k), spec).sparse.data
        np.testing.assert_array_equal(out, route_oracle(w, int(k), compute_alpha(spec)))


def test_batched_route_equals_per_item():
    rng = np.random.default_rng(1)
    w = _softmax(rng.normal(size=(3, 5, 4)))
    spec = CapacitySpec(1.0, 5, 2, 4)
    out = route(w, 2, spec).sparse.data
    for b in range(3):
        np.testing.assert_array_equal(out[b], route(w[b], 2, spec).sparse.data)


@settings(max_examples=60)
@given(st.integers(1, 12), st.integers(1, 8), st.data())
def test_budgets_hold(r, M, data):
    k = data.draw(st.integers(1, M))
    w = np.array(data.draw(st.lists(st.floats(0, 1), min_size=r * M, max_size=r * M))).reshape(r, M)
    spec = CapacitySpec(1.0, r, k, M)
    g = route(w, k, spec)
    mask = g.sparse.data != 0
    assert (mask.sum(axis=1) <= k).all()
    assert (mask.sum(axis=0) <= g.alpha).all()
    # kept values are untouched (no renormalisation)
    np.testing.assert_array_equal(g.sparse.data[mask], w[mask])


def test_straight_through_gradient():
    w = nn.parameter(np.array([[0.5, 0.3, 0.2], [0.1, 0.6, 0.3]]))
    g = route(w, 1, CapacitySpec(1.0, 2, 1, 3))
    weights = np.arange(6.0).reshape(2, 3)
    grads = nn.backward((g.sparse * weights).sum(), [w])
    np.testing.assert_array_equal(grads[w], weights * g.mask)


def test_top_k_mask_k_at_least_n():
    assert top_k_mask(np.zeros((2, 3)), 5).all()
