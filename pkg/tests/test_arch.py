import json

import pytest

from edgemoe.arch import (
    DEPLOYED_MOE,
    PRESETS,
    ArchError,
    BaseArch,
    DispatchMode,
    MemoryBudget,
    MoeSpec,
    arch_from_dict,
    arch_to_dict,
    count_params,
    inference_flops,
    kv_cache_bytes,
    load_arch,
    memory_proxy,
    save_arch,
    training_flops,
)

# frozen outputs of the accounting formulas for the three published backbones
EXPECTED = {
    "S": (272_468_736, 1_263_373_056, 0.715572608),
    "M": (528_299_008, 2_818_388_992, 1.5182464),
    "L": (921_683_200, 5_325_702_400, 2.797068928),
}
PUBLISHED = {"S": (272e6, 1.26e9), "M": (528e6, 2.82e9), "L": (922e6, 5.33e9)}


@pytest.mark.parametrize("name", ["S", "M", "L"])
def test_preset_counts_frozen(name):
    c = count_params(PRESETS[name], DEPLOYED_MOE)
    assert (c.n_act, c.n_total) == EXPECTED[name][:2]


@pytest.mark.parametrize("name", ["S", "M", "L"])
def test_preset_counts_match_published_within_one_percent(name):
    c = count_params(PRESETS[name], DEPLOYED_MOE)
    n_act, n_total = PUBLISHED[name]
    assert abs(c.n_act / n_act - 1) < 0.01
    assert abs(c.n_total / n_total - 1) < 0.01


@pytest.mark.parametrize("name", ["S", "M", "L"])
def test_memory_proxy_frozen(name):
    c = count_params(PRESETS[name], DEPLOYED_MOE)
    rep = memory_proxy(c, PRESETS[name], MemoryBudget(b_w=4, b_kv=8, T=8192))
    assert rep.total_gb == pytest.approx(EXPECTED[name][2], rel=1e-12)
    assert rep.feasible


def test_s_breakdown_by_hand():
    c = count_params(PRESETS["S"], DEPLOYED_MOE)
    b = c.breakdown
    assert b["embedding"] == 128_256 * 768
    assert b["attention"] == 20 * (2 * 768 * 768 + 2 * 768 * 256)
    # 64 fine units per layer: 4 fused into the shared expert, 60 routed, top-4 of them active
    assert b["router"] == 20 * 768 * 60
    assert b["routed_experts"] == 20 * 60 * 3 * 768 * 384
    assert b["shared_expert"] == 20 * 3 * 768 * 4 * 384
    assert b["norms"] == 41 * 768
    assert c.active_breakdown["routed_experts"] == 20 * 4 * 3 * 768 * 384


def test_dense_has_no_router_and_single_expert_equals_dense():
    base = PRESETS["S"]
    dense = count_params(base, MoeSpec())
    assert dense.breakdown["router"] == 0
    assert dense.n_act == dense.n_total
    assert dense.breakdown["routed_experts"] == 20 * 3 * 768 * 3072


def test_granularity_keeps_expert_block_size():
    base = PRESETS["S"]
    for g in (1, 2, 4, 8, 16):
        c = count_params(base, MoeSpec(E=8, g=g, k=1))
        ref = count_params(base, MoeSpec(E=8, g=1, k=1))
        assert c.breakdown["routed_experts"] == ref.breakdown["routed_experts"]
        assert c.active_breakdown["routed_experts"] == ref.active_breakdown["routed_experts"]
        # only the router widens with the fine-grained expert count
        assert c.n_total - ref.n_total == 20 * 768 * (8 * g - 8)


def test_indivisible_granularity_rejected():
    base = BaseArch(64, 96, 4, 2, 16, 2, vocab_size=32)
    with pytest.raises(ArchError):
        count_params(base, MoeSpec(E=2, g=64))


def test_moespec_validation():
    with pytest.raises(ArchError):
        MoeSpec(E=4, k=5)
    with pytest.raises(ArchError):
        MoeSpec(shared=True)  # four shared units need g * k >= 4
    assert MoeSpec(E=8, g=8, shared=True).shared_units == 4
    assert MoeSpec(E=8, g=8, k=1).routed_topk == 8
    assert MoeSpec(E=8, g=8).routed_count == 64
    assert (DEPLOYED_MOE.routed_count, DEPLOYED_MOE.routed_topk) == (60, 4)


def test_flops():
    c = count_params(PRESETS["S"], DEPLOYED_MOE)
    assert inference_flops(c) == 2 * c.n_act
    assert training_flops(c, 1e9) == 6 * c.n_act * 1e9
    assert training_flops(1e9, 2e9) == 1.2e19
    with pytest.raises(ArchError):
        training_flops(c, -1)


def test_kv_cache_formula():
    base = PRESETS["S"]
    assert kv_cache_bytes(base, 8, 8192) == 2 * 8192 * 20 * 4 * 64
    assert kv_cache_bytes(base, 16, 0) == 0


def test_budget_validation():
    with pytest.raises(ArchError):
        MemoryBudget(b_w=3)
    with pytest.raises(ArchError):
        MemoryBudget(M=0)


def test_config_round_trip(tmp_path):
    base, moe = PRESETS["M"], DEPLOYED_MOE
    path = tmp_path / "m.json"
    save_arch(path, base, moe)
    assert load_arch(path) == (base, moe)
    d = arch_to_dict(base, MoeSpec(E=4, dispatch_mode=DispatchMode.DROP_AND_PAD))
    assert json.loads(json.dumps(d))["moe"]["dispatch"] == "drop-and-pad"
    assert arch_from_dict(d)[1].dispatch_mode is DispatchMode.DROP_AND_PAD


def test_malformed_config():
    with pytest.raises(ArchError):
        arch_from_dict({"moe": {}})
