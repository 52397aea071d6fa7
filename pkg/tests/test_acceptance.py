"""End-to-end acceptance checks, one test per criterion.

Each test records a one-line PASS/FAIL verdict with the measured numbers; the
lines are printed together at the end of the pytest run.
"""

import time

import numpy as np
from edgemoe.arch import DEPLOYED_MOE, PRESETS, DispatchMode, MemoryBudget, count_params, memory_proxy
from edgemoe.container import model_bytes, model_from_bytes, quantize_model
from edgemoe.kernel import (
    FusedMoe,
    NaiveMoe,
    bank_from_experts,
    fused_moe_forward,
    naive_moe_forward,
    relative_deviation,
)
from edgemoe.model import balance_steps, memorize, transformer_forward
from edgemoe.model.layers import swiglu_ffn
from edgemoe.model.moe import LayerExperts, moe_backward, moe_forward
from edgemoe.model.router import RouterState, router_forward
from edgemoe.quant import dequantize, quantize_weights
from edgemoe.scaling import (
    ExpertTransform,
    fit,
    load_fixture,
    optimize_architecture,
    predict_loss,
    synthetic_observations,
)

from conftest import ACCEPTANCE_LINES, tiny_model

JOINT = load_fixture("expert_sweep_joint")
T = ExpertTransform()


def verdict(n: int, ok: bool, detail: str, elapsed: float, limit: float) -> None:
    ok = ok and elapsed < limit
    ACCEPTANCE_LINES.append(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}  "
                            f"[{elapsed:.2f}s, limit {limit:g}s]")
    assert ok, ACCEPTANCE_LINES[-1]


def test_criterion_01_parameter_counts():
    t0 = time.perf_counter()
    published = {"S": (272e6, 1.26e9), "M": (528e6, 2.82e9), "L": (922e6, 5.33e9)}
    errs = {}
    for name, (act, tot) in published.items():
        c = count_params(PRESETS[name], DEPLOYED_MOE)
        errs[name] = max(abs(c.n_act / act - 1), abs(c.n_total / tot - 1))
    detail = ", ".join(f"{k} max rel err {v:.2%}" for k, v in errs.items())
    verdict(1, all(v < 0.01 for v in errs.values()), detail, time.perf_counter() - t0, 1)


def test_criterion_02_memory_proxy():
    t0 = time.perf_counter()
    reported = {"S": 0.76, "M": 1.58, "L": 2.88}
    got = {}
    for name in reported:
        c = count_params(PRESETS[name], DEPLOYED_MOE)
        got[name] = memory_proxy(c, PRESETS[name], MemoryBudget(b_w=4, b_kv=8, T=8192)).total_gb
    within = all(abs(got[k] / reported[k] - 1) < 0.10 for k in reported)
    ok = within and abs(got["S"] - 0.716) < 1e-3
    detail = ", ".join(f"{k} {got[k]:.3f} GB vs {reported[k]} ({got[k] / reported[k] - 1:+.1%})"
                       for k in reported)
    verdict(2, ok, detail, time.perf_counter() - t0, 1)


def test_criterion_03_optimizer():
    t0 = time.perf_counter()
    best = {m: optimize_architecture(JOINT, T, 5e20, MemoryBudget(M=m)).best_e for m in (1, 2, 5)}
    ok = best[5] == 8 and all(e in (4, 8) for e in best.values())
    verdict(3, ok, f"best E by memory budget (GB) {best}", time.perf_counter() - t0, 10)


def test_criterion_04_loss_ordering():
    t0 = time.perf_counter()
    loss = {e: predict_loss(JOINT, 0.3, 100, T(e)) for e in (1, 2, 4, 8, 16)}
    decreasing = loss[1] > loss[2] > loss[4] > loss[8]
    tail_gain = loss[8] - loss[16]
    ok = decreasing and tail_gain < 0.01
    detail = (f"losses E=1..16 {[round(v, 4) for v in loss.values()]}, "
              f"gain beyond E=8 {tail_gain:.4f} nats")
    verdict(4, ok, detail, time.perf_counter() - t0, 1)


def _held_out_rmse(res, held):
    pred = np.array([res.predict(o.n_act, o.d, o.e, T) for o in held])
    return float(np.sqrt(np.mean((pred - np.array([o.loss for o in held])) ** 2)))


def _split(obs):
    train = [o for o in obs if o.d in (100, 200, 300, 400, 500)]
    return train, [o for o in obs if o not in train]


def test_criterion_05_fit_round_trip():
    t0 = time.perf_counter()
    train, held = _split(synthetic_observations(JOINT, T))
    clean = _held_out_rmse(fit(train, T), held)
    noisy = []
    for seed in range(20):
        obs = synthetic_observations(JOINT, T, noise=0.01, rng=np.random.default_rng(seed))
        train, held = _split(obs)
        noisy.append(_held_out_rmse(fit(train, T), held))
    ok = clean < 1e-3 and all(0.005 <= r <= 0.02 for r in noisy)
    detail = (f"noiseless held-out RMSE {clean:.1e}; sigma=0.01 held-out RMSE over 20 seeds "
              f"in [{min(noisy):.4f}, {max(noisy):.4f}]")
    verdict(5, ok, detail, time.perf_counter() - t0, 120)


def _random_layer(rng, R, d, f, shared):
    ex = LayerExperts(rng.normal(size=(R, f, d)) * 0.3, rng.normal(size=(R, f, d)) * 0.3,
                      rng.normal(size=(R, d, f)) * 0.3,
                      tuple(rng.normal(size=s) * 0.3 for s in ((f, d), (f, d), (d, f))) if shared else None)
    router = None if R == 1 else RouterState(rng.normal(size=(R, d)), rng.normal(size=R) * 0.05)
    return ex, router


def test_criterion_06_moe_equivalence():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    dense_exact = True
    for _ in range(20):
        ex, _ = _random_layer(rng, 1, 16, 12, False)
        x = rng.normal(size=(int(rng.integers(1, 40)), 16))
        dense_exact &= np.array_equal(moe_forward(x, ex, None, 1).y,
                                      swiglu_ffn(x, ex.w_gate[0], ex.w_up[0], ex.w_down[0]))
    worst, pad_exact = 0.0, True
    for case in range(1000):
        R = int(rng.integers(1, 17))
        ex, router = _random_layer(rng, R, 32, 16, bool(rng.integers(2)))
        topk = 1 if R == 1 else int(rng.integers(1, min(R, 4) + 1))
        x = rng.normal(size=(int(rng.integers(1, 257)), 32))
        bank = bank_from_experts(ex)
        if case % 2:
            q = quantize_weights
            bank.gate_up = [q(w) for w in bank.gate_up]
            bank.down = [q(w) for w in bank.down]
            if ex.shared is not None:
                bank.shared_gate_up, bank.shared_down = q(bank.shared_gate_up), q(bank.shared_down)
        fused = fused_moe_forward(x, router, bank, topk).y
        worst = max(worst, relative_deviation(fused, naive_moe_forward(x, router, bank, topk)))
        if case % 10 == 0:
            drop = moe_forward(x, ex, router, topk)
            pad = moe_forward(x, ex, router, topk, DispatchMode.DROP_AND_PAD,
                              capacity_factor=float(max(R, 1)) / topk + 1)
            pad_exact &= np.array_equal(drop.y, pad.y)
    ok = dense_exact and pad_exact and worst < 1e-4
    detail = (f"dense exact={dense_exact}, fused vs per-token loop worst rel dev {worst:.1e} "
              f"over 1000 cases, drop-and-pad == dropless {pad_exact}")
    verdict(6, ok, detail, time.perf_counter() - t0, 60)


def test_criterion_07_quantization():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    w = rng.normal(size=(100_000, 32)) * rng.lognormal(size=(100_000, 1))
    q = quantize_weights(w)
    err = np.abs(dequantize(q) - w) / q.scales.astype(np.float64)
    again = quantize_weights(dequantize(q))
    idempotent = np.array_equal(again.packed, q.packed)
    qm = model_from_bytes(model_bytes(quantize_model(tiny_model()), quantize=True)[0])
    routers_fp = all(n not in qm.quantized for n in qm.params if n.endswith(".router"))
    ok = err.max() <= 0.5 + 1e-12 and idempotent and routers_fp
    detail = (f"max |error|/scale {err.max():.4f} over 1e5 groups, codes idempotent {idempotent}, "
              f"routers full precision {routers_fp}")
    verdict(7, ok, detail, time.perf_counter() - t0, 30)


def test_criterion_08_gradient_check():
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    ex, router = _random_layer(rng, 6, 16, 12, True)
    x = rng.normal(size=(12, 16))
    sel = router_forward(x, router, 2).selected
    dy = rng.normal(size=x.shape)
    lam = 0.3

    def loss():
        out = moe_forward(x, ex, router, 2, forced_selection=sel)
        return float(np.sum(out.y * dy)) + lam * out.router.z_loss

    dx, g = moe_backward(dy, moe_forward(x, ex, router, 2, forced_selection=sel, keep_cache=True),
                         ex, dz=lam)
    targets = [(x, dx), (ex.w_gate, g["w_gate"]), (ex.w_up, g["w_up"]), (ex.w_down, g["w_down"]),
               (router.gate_matrix, g["router"])] + list(zip(ex.shared, g["shared"]))
    errs = []
    h = 1e-6
    for arr, grad in targets:
        for _ in range(16):
            idx = tuple(rng.integers(0, s) for s in arr.shape)
            old = arr[idx]
            arr[idx] = old + h
            up = loss()
            arr[idx] = old - h
            dn = loss()
            arr[idx] = old
            num = (up - dn) / (2 * h)
            errs.append(abs(num - grad[idx]) / max(abs(num), abs(grad[idx]), 1e-8))
    ok = len(errs) >= 100 and max(errs) < 1e-4
    detail = f"{len(errs)} parameters, max relative error {max(errs):.1e}"
    verdict(8, ok, detail, time.perf_counter() - t0, 60)


def test_criterion_09_balancing():
    t0 = time.perf_counter()
    m = tiny_model(shared=False, seed=0)
    rng = np.random.default_rng(0)
    probe = rng.integers(0, 64, (16, 32))
    before = transformer_forward(probe, m).loads
    hist = balance_steps(m, (rng.integers(0, 64, (4, 32)) for _ in range(1000)))
    tail = np.sum(hist[-100:], axis=0)
    ratio = tail.max(axis=1) / tail.min(axis=1)
    ok = bool(np.all(ratio < 1.2))
    detail = (f"max/min load over the final 100 of 1000 steps per layer {np.round(ratio, 3).tolist()} "
              f"(before balancing {np.round(before.max(1) / before.min(1), 2).tolist()})")
    verdict(9, ok, detail, time.perf_counter() - t0, 120)


def test_criterion_10_desk_scale_substitutes():
    t0 = time.perf_counter()
    m = tiny_model(seed=2, std=0.02)
    seq = np.random.default_rng(5).integers(0, 64, 65)
    ce = memorize(m, seq, 200)
    qm = quantize_model(m)
    toks = seq[:48]
    dev = relative_deviation(transformer_forward(toks, qm, moe_fn=FusedMoe(qm)).logits,
                             transformer_forward(toks, qm, moe_fn=NaiveMoe(qm)).logits)
    ok = ce[-1] < 0.1 and dev < 1e-4
    detail = ("large-scale training curves, accuracy benchmarks and phone latency/memory are not "
              f"reproducible here; substitutes: memorization CE {ce[0]:.2f} -> {ce[-1]:.4f} in 200 "
              f"steps, quantized fused vs naive model logits rel dev {dev:.1e}, bench report "
              "format covered by the kernel tests")
    verdict(10, ok, detail, time.perf_counter() - t0, 60)
