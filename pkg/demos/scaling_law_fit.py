"""
Fitting the expert-aware scaling law
====================================

Generate losses from known coefficients, refit them from scratch, and check
the refit predicts points it never saw. Then compare design settings at a
few compute budgets.
"""

import numpy as np

from edgemoe.scaling import (
    ExpertTransform,
    fit,
    frontier_sweep,
    frontier_to_csv,
    load_fixture,
    predict_loss,
    sweep_settings,
    synthetic_observations,
)

truth = load_fixture("expert_sweep_joint")
t = ExpertTransform()

obs = synthetic_observations(truth, t, noise=0.01, rng=np.random.default_rng(0))
train = [o for o in obs if o.d % 100 == 0]
held = [o for o in obs if o.d % 100 != 0]
res = fit(train, t)
pred = np.array([res.predict(o.n_act, o.d, o.e, t) for o in held])
rmse = np.sqrt(np.mean((pred - [o.loss for o in held]) ** 2))
print(f"fit on {len(train)} noisy points, held-out RMSE {rmse:.4f} (noise 0.01)")
print("fitted c:", round(res.coeffs.c, 4), " true c:", truth.c)

# Diminishing returns in the expert count at 0.3B active params, 100B tokens
for e in (1, 2, 4, 8, 16, 32):
    print(f"E={e:2d}  loss {predict_loss(truth, 0.3, 100, t(e)):.4f}")

# Compute-optimal loss per granularity, ready for plotting elsewhere
rows = frontier_sweep(sweep_settings("granularity"), [1e20, 5e20, 1e21])
print(frontier_to_csv(rows))
