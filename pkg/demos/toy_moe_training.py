"""
Training a toy MoE transformer
==============================

A two-layer decoder with a shared expert and seven routed experts. First it
memorizes a random sequence, then the balance bias alone evens out expert
load on random text, and finally we look at which experts the shipped prompts
wake up.
"""

import numpy as np

from edgemoe.arch import BaseArch, MoeSpec
from edgemoe.cli import default_prompt_files
from edgemoe.model import balance_steps, expert_utilization, generate, init_model, memorize
from edgemoe.text import read_prompts

base = BaseArch(d_model=64, d_ff=128, n_h=4, n_kv=2, d_h=16, n_l=2, vocab_size=64)
moe = MoeSpec(E=4, g=2, k=1, shared=True, shared_units=1)
model = init_model(base, moe, seed=2, std=0.02)

seq = np.random.default_rng(5).integers(0, 64, 65)
ce = memorize(model, seq, steps=200)
print(f"cross-entropy {ce[0]:.3f} -> {ce[-1]:.4f}")
print("recall:", generate(model, seq[:8].tolist(), 8), "expected:", seq[8:16].tolist())

fresh = init_model(base, MoeSpec(E=4, g=2, k=1), seed=0, std=0.2)
rng = np.random.default_rng(0)
loads = balance_steps(fresh, (rng.integers(0, 64, (4, 32)) for _ in range(1000)))
# Single batches are noisy, so compare load summed over a window of steps
for name, window in (("first 100 steps", loads[:100]), ("last 100 steps", loads[-100:])):
    total = np.sum(window, axis=0)
    print(f"{name}: max/min load per layer", np.round(total.max(1) / total.min(1), 3))

# Utilization per prompt domain
for domain, path in default_prompt_files().items():
    u = expert_utilization(model, read_prompts(path, base.vocab_size))
    print(domain, "argmax expert per layer:", u.argmax_experts(), "active:", u.active_experts())
