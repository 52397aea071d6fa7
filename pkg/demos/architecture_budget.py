"""
Sizing an on-device MoE
=======================

Count parameters for the three shipped presets, check how much memory they
need at 4-bit weights with an 8k context, then ask the optimizer which expert
count gives the lowest predicted loss under a few device budgets.
"""

from edgemoe.arch import DEPLOYED_MOE, PRESETS, MemoryBudget, count_params, memory_proxy
from edgemoe.scaling import ExpertTransform, load_fixture, optimize_architecture

budget = MemoryBudget(b_w=4, b_kv=8, T=8192)
for name, base in PRESETS.items():
    c = count_params(base, DEPLOYED_MOE)
    mem = memory_proxy(c, base, budget)
    print(f"{name}: {c.n_act / 1e6:7.1f}M active  {c.n_total / 1e9:5.2f}B total  "
          f"{mem.total_gb:5.3f} GB (weights {mem.weight_gb:.3f}, kv {mem.kv_gb:.3f})")

# Each routed expert is a slice of the dense FFN, so only a few of them run per
# token. The router matrix is the only part that grows with granularity.
print("router params in S:", count_params(PRESETS["S"], DEPLOYED_MOE).breakdown["router"] / 1e6, "M")

coeffs = load_fixture("expert_sweep_joint")
t = ExpertTransform()
for gb in (1, 2, 5):
    res = optimize_architecture(coeffs, t, 5e20, MemoryBudget(M=gb))
    print(f"{gb} GB budget -> best E = {res.best_e}")
    print("   ", res.summary())
