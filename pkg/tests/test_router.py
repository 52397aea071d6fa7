import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from edgemoe.arch import DispatchMode
from edgemoe.model.router import (
    RouterState,
    RoutingError,
    build_dispatch,
    drop_and_pad_capacity,
    router_forward,
    select_topk,
    update_balance_bias,
)


def _state_for_logits(logits, bias=None):
    """Router whose gate produces ``logits`` for the identity input."""
    logits = np.asarray(logits, dtype=np.float64)
    R = logits.size
    gate = np.zeros((R, R))
    np.fill_diagonal(gate, 1.0)
    x = logits[None, :]
    return x, RouterState(gate, np.zeros(R) if bias is None else np.asarray(bias, float))


def sig(v):
    return 1 / (1 + np.exp(-v))


def test_zero_logits_tie_break_lowest_index():
    x, st_ = _state_for_logits([0, 0, 0, 0])
    out = router_forward(x, st_, 2)
    assert out.selected.tolist() == [[0, 1]]
    assert out.weights.tolist() == [[0.5, 0.5]]


def test_hand_evaluated_selection_and_weights():
    x, st_ = _state_for_logits([2, -1, 0.5, 0])
    out = router_forward(x, st_, 2)
    assert out.selected.tolist() == [[0, 2]]
    w0 = sig(2) / (sig(2) + sig(0.5))
    assert out.weights[0] == pytest.approx([w0, 1 - w0], rel=1e-12)
    assert w0 == pytest.approx(0.5860, abs=1e-4)


def test_bias_affects_selection_only():
    x, st_ = _state_for_logits([-5, 3, 3, 3], bias=[10, 0, 0, 0])
    out = router_forward(x, st_, 1)
    assert out.selected.tolist() == [[0]]
    assert out.weights.tolist() == [[1.0]]


def test_z_loss_definition():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(5, 8))
    gate = rng.normal(size=(4, 8))
    out = router_forward(x, RouterState(gate, np.zeros(4)), 2)
    logits = x @ gate.T
    lse = np.log(np.exp(logits).sum(axis=1))
    assert out.z_loss == pytest.approx(np.mean(lse**2), rel=1e-12)
    assert out.z_loss > 0


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 8), st.integers(1, 30))
def test_router_invariants(seed, R, N):
    rng = np.random.default_rng(seed)
    topk = int(rng.integers(1, R + 1))
    state = RouterState(rng.normal(size=(R, 6)), rng.normal(size=R) * 0.1)
    out = router_forward(rng.normal(size=(N, 6)) * 3, state, topk)
    assert np.allclose(out.weights.sum(axis=1), 1.0, atol=1e-6)
    assert all(len(set(row)) == topk for row in out.selected.tolist())
    assert out.z_loss >= 0


def test_bias_change_keeps_weights_for_same_selection():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(10, 6))
    gate = rng.normal(size=(4, 6))
    a = router_forward(x, RouterState(gate, np.zeros(4)), 2)
    b = router_forward(x, RouterState(gate, np.full(4, 0.3)), 2)  # uniform shift keeps order
    assert np.array_equal(a.selected, b.selected)
    assert np.array_equal(a.weights, b.weights)


def test_topk_out_of_range():
    x, st_ = _state_for_logits([0, 0])
    with pytest.raises(RoutingError):
        router_forward(x, st_, 3)
    with pytest.raises(RoutingError):
        router_forward(x, st_, 0)


def test_select_topk_stable():
    assert select_topk(np.array([[1.0, 2.0, 2.0, 0.0]]), 2).tolist() == [[1, 2]]


def test_bias_update_rule():
    st_ = RouterState(np.zeros((4, 2)), np.zeros(4), lambda_lb=1e-3)
    update_balance_bias(st_, [10, 0, 0, 0])
    assert st_.balance_bias.tolist() == [-1e-3, 1e-3, 1e-3, 1e-3]
    before = st_.balance_bias.copy()
    update_balance_bias(st_, [5, 5, 5, 5])
    assert np.array_equal(st_.balance_bias, before)
    with pytest.raises(RoutingError):
        update_balance_bias(st_, [1, 2])


def test_bias_updates_reduce_skew_in_simulation():
    rng = np.random.default_rng(7)
    R, d = 4, 8
    gate = rng.normal(size=(R, d))
    gate[0] += 1.5  # expert 0 favoured
    state = RouterState(gate, np.zeros(R), lambda_lb=1e-2)

    def ratio():
        x = np.random.default_rng(99).normal(size=(4000, d))
        load = np.bincount(router_forward(x, state, 1).selected[:, 0], minlength=R)
        return load.max() / max(load.min(), 1)

    start = ratio()
    for _ in range(300):
        sel = router_forward(rng.normal(size=(256, d)), state, 1).selected[:, 0]
        update_balance_bias(state, np.bincount(sel, minlength=R))
    assert ratio() < start


def test_capacity_formula():
    assert drop_and_pad_capacity(1.5, 4, 1, 4) == 2
    assert drop_and_pad_capacity(1.5, 10, 2, 8) == 4


def test_drop_and_pad_keeps_earliest_tokens():
    plan = build_dispatch(np.zeros((4, 1), int), 4, DispatchMode.DROP_AND_PAD, 1.5)
    assert plan.capacity == 2
    assert plan.dropped[:, 0].tolist() == [False, False, True, True]
    assert plan.expert_slots(0).tolist() == [0, 1]
    assert plan.counts.tolist() == [2, 0, 0, 0]


def test_drop_and_pad_under_capacity_keeps_all():
    plan = build_dispatch(np.array([[0], [1], [2], [0]]), 4, DispatchMode.DROP_AND_PAD, 1.5)
    assert not plan.dropped.any()


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_dispatch_invariants(seed):
    rng = np.random.default_rng(seed)
    R = int(rng.integers(1, 9))
    topk = int(rng.integers(1, R + 1))
    N = int(rng.integers(0, 40))
    sel = np.stack([rng.permutation(R)[:topk] for _ in range(N)]) if N else np.zeros((0, topk), int)
    dl = build_dispatch(sel, R, DispatchMode.DROPLESS)
    assert not dl.dropped.any()
    assert np.all(np.diff(dl.offsets) >= 0)
    assert sorted(dl.permutation.tolist()) == list(range(N * topk))
    dp = build_dispatch(sel, R, DispatchMode.DROP_AND_PAD, float(rng.uniform(0.2, 2)))
    assert np.all(dp.counts <= dp.capacity)
    assert dp.counts.sum() + dp.dropped.sum() == N * topk
    for e in range(R):
        slots = dp.expert_slots(e)
        assert np.all(np.diff(slots) > 0)  # position order inside an expert


def test_dispatch_rejects_bad_ids():
    with pytest.raises(RoutingError):
        build_dispatch(np.array([[5]]), 4)
