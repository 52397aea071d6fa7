import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from edgemoe.arch import DispatchMode
from edgemoe.model.layers import swiglu_ffn
from edgemoe.model.moe import LayerExperts, moe_backward, moe_forward, moe_naive_loop
from edgemoe.model.router import RouterState, router_forward


def random_layer(rng, R=6, d=16, f=12, shared=True, scale=0.3):
    ex = LayerExperts(
        rng.normal(size=(R, f, d)) * scale,
        rng.normal(size=(R, f, d)) * scale,
        rng.normal(size=(R, d, f)) * scale,
        tuple(rng.normal(size=s) * scale for s in ((f, d), (f, d), (d, f))) if shared else None,
    )
    router = RouterState(rng.normal(size=(R, d)), rng.normal(size=R) * 0.05)
    return ex, router


def test_dense_recovery_is_exact():
    rng = np.random.default_rng(0)
    ex, _ = random_layer(rng, R=1, shared=False)
    x = rng.normal(size=(20, 16))
    out = moe_forward(x, ex, None, 1)
    assert np.array_equal(out.y, swiglu_ffn(x, ex.w_gate[0], ex.w_up[0], ex.w_down[0]))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_dropless_equals_naive_loop(seed):
    rng = np.random.default_rng(seed)
    R = int(rng.integers(1, 9))
    ex, router = random_layer(rng, R=R, shared=bool(rng.integers(2)))
    topk = int(rng.integers(1, R + 1))
    x = rng.normal(size=(int(rng.integers(1, 30)), 16))
    out = moe_forward(x, ex, router, topk)
    ref = moe_naive_loop(x, ex, out.router)
    assert np.allclose(out.y, ref, rtol=1e-12, atol=1e-12)


def test_drop_and_pad_with_ample_capacity_equals_dropless_exactly():
    rng = np.random.default_rng(2)
    ex, router = random_layer(rng)
    x = rng.normal(size=(32, 16))
    a = moe_forward(x, ex, router, 2, DispatchMode.DROPLESS)
    b = moe_forward(x, ex, router, 2, DispatchMode.DROP_AND_PAD, capacity_factor=6.0)
    assert not b.plan.dropped.any()
    assert np.array_equal(a.y, b.y)


def test_dropped_slots_contribute_nothing():
    rng = np.random.default_rng(3)
    ex, router = random_layer(rng, shared=False)
    x = rng.normal(size=(32, 16))
    out = moe_forward(x, ex, router, 2, DispatchMode.DROP_AND_PAD, capacity_factor=0.5)
    assert out.plan.dropped.any()
    ref = moe_naive_loop(x, ex, out.router, dropped=out.plan.dropped)
    assert np.allclose(out.y, ref, atol=1e-12)


def test_zero_input_gives_zero_output():
    rng = np.random.default_rng(4)
    ex, router = random_layer(rng)
    router.balance_bias[:] = 0
    assert np.array_equal(moe_forward(np.zeros((5, 16)), ex, router, 2).y, np.zeros((5, 16)))


def test_shared_expert_added_unweighted():
    rng = np.random.default_rng(5)
    ex, router = random_layer(rng)
    x = rng.normal(size=(7, 16))
    with_shared = moe_forward(x, ex, router, 2).y
    no_shared = moe_forward(x, LayerExperts(ex.w_gate, ex.w_up, ex.w_down), router, 2).y
    assert np.allclose(with_shared - no_shared, swiglu_ffn(x, *ex.shared), atol=1e-12)


def test_permutation_equivariance():
    rng = np.random.default_rng(6)
    ex, router = random_layer(rng)
    x = rng.normal(size=(25, 16))
    p = rng.permutation(25)
    a = moe_forward(x, ex, router, 2).y
    b = moe_forward(x[p], ex, router, 2).y
    assert np.allclose(a[p], b, atol=1e-12)


def test_shape_mismatch():
    rng = np.random.default_rng(7)
    ex, router = random_layer(rng)
    with pytest.raises(ValueError):
        moe_forward(rng.normal(size=(3, 15)), ex, RouterState(np.zeros((6, 15)), np.zeros(6)), 1)


def _fd(f, arr, idx, h=1e-6):
    old = arr[idx]
    arr[idx] = old + h
    up = f()
    arr[idx] = old - h
    dn = f()
    arr[idx] = old
    return (up - dn) / (2 * h)


def test_moe_gradients_with_frozen_routing():
    rng = np.random.default_rng(8)
    ex, router = random_layer(rng)
    x = rng.normal(size=(10, 16))
    sel = router_forward(x, router, 2).selected
    dy = rng.normal(size=(10, 16))

    def loss():
        return float(np.sum(moe_forward(x, ex, router, 2, forced_selection=sel).y * dy))

    out = moe_forward(x, ex, router, 2, forced_selection=sel, keep_cache=True)
    dx, g = moe_backward(dy, out, ex)
    checks = [(x, dx), (ex.w_gate, g["w_gate"]), (ex.w_up, g["w_up"]), (ex.w_down, g["w_down"]),
              (router.gate_matrix, g["router"]), (ex.shared[0], g["shared"][0]),
              (ex.shared[2], g["shared"][2])]
    for arr, grad in checks:
        for _ in range(6):
            idx = tuple(rng.integers(0, s) for s in arr.shape)
            num = _fd(loss, arr, idx)
            assert abs(num - grad[idx]) <= 1e-6 * max(1.0, abs(num))
