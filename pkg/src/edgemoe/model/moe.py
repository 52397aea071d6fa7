"""MoE feed-forward block: fine-grained routed experts plus an optional shared expert."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..arch import DispatchMode
from .layers import swiglu_backward, swiglu_forward
from .router import (
    DispatchPlan,
    RouterOutput,
    RouterState,
    build_dispatch,
    router_backward,
    router_forward,
)


@dataclass
class LayerExperts:
    w_gate: np.ndarray  # (R, f, d)
    w_up: np.ndarray  # (R, f, d)
    w_down: np.ndarray  # (R, d, f)
    shared: tuple[np.ndarray, np.ndarray, np.ndarray] | None = None

    @property
    def n_experts(self) -> int:
        return self.w_gate.shape[0]

    def __post_init__(self):
        R, f, d = self.w_gate.shape
        if self.w_up.shape != (R, f, d) or self.w_down.shape != (R, d, f):
            raise ValueError("expert weight shapes are inconsistent")


@dataclass
class MoeOutput:
    y: np.ndarray
    router: RouterOutput
    plan: DispatchPlan
    load: np.ndarray  # kept slots per routed expert
    cache: tuple | None = None


def dense_routing(n_tokens: int) -> RouterOutput:
    """Single routed expert with weight 1 for every token (no router)."""
    return RouterOutput(
        selected=np.zeros((n_tokens, 1), dtype=np.int64),
        weights=np.ones((n_tokens, 1)),
        z_loss=0.0,
        raw_scores=np.ones((n_tokens, 1)),
        logits=None,
    )


def moe_combine(x, experts: LayerExperts, plan: DispatchPlan, router_out: RouterOutput,
                keep_cache: bool = False):
    """``y = sum_kept weight * SwiGLU_e(x) + SwiGLU_shared(x)``.

    Contributions are accumulated expert by expert in ascending expert order.
    """
    if x.ndim != 2 or x.shape[1] != experts.w_gate.shape[2]:
        raise ValueError(f"input shape {x.shape} does not match expert width")
    topk = plan.topk
    y = np.zeros(x.shape, dtype=np.float64)
    w_flat = router_out.weights.reshape(-1)
    per_expert = []
    for e in range(experts.n_experts):
        slots = plan.expert_slots(e)
        if slots.size == 0:
            continue
        tok = slots // topk
        out, c = swiglu_forward(x[tok], experts.w_gate[e], experts.w_up[e], experts.w_down[e])
        np.add.at(y, tok, w_flat[slots, None] * out)
        if keep_cache:
            per_expert.append((e, slots, tok, out, c))
    shared_cache = None
    if experts.shared is not None:
        s_out, shared_cache = swiglu_forward(x, *experts.shared)
        y += s_out
    cache = (per_expert, shared_cache) if keep_cache else None
    return y, cache


def moe_forward(x, experts: LayerExperts, router: RouterState | None, topk: int,
                mode=DispatchMode.DROPLESS, capacity_factor: float = 1.5,
                forced_selection=None, expert_input=None, keep_cache: bool = False) -> MoeOutput:
    """Route, dispatch and combine one block.

    ``expert_input`` substitutes the tensor fed to the expert FFNs while
    routing still sees ``x``; the quantized kernel's oracle uses this.
    """
    x = np.asarray(x, dtype=np.float64)
    if router is None:
        rout = dense_routing(x.shape[0])
    else:
        rout = router_forward(x, router, topk, forced_selection)
    plan = build_dispatch(rout.selected, experts.n_experts, mode, capacity_factor)
    xe = x if expert_input is None else np.asarray(expert_input, dtype=np.float64)
    y, c = moe_combine(xe, experts, plan, rout, keep_cache)
    cache = (x, c, router) if keep_cache else None
    return MoeOutput(y, rout, plan, plan.counts.astype(np.int64), cache)


def moe_backward(dy, out: MoeOutput, experts: LayerExperts, dz: float = 0.0):
    """Input gradient and parameter grads; ``dz`` is the upstream gradient of the z-loss."""
    x, (per_expert, shared_cache), router = out.cache
    topk = out.plan.topk
    dx = np.zeros_like(x)
    grads = {
        "w_gate": np.zeros_like(experts.w_gate),
        "w_up": np.zeros_like(experts.w_up),
        "w_down": np.zeros_like(experts.w_down),
    }
    w_flat = out.router.weights.reshape(-1)
    dweights = np.zeros(w_flat.shape)
    for e, slots, tok, e_out, c in per_expert:
        g = dy[tok]
        dweights[slots] = np.sum(g * e_out, axis=1)
        dh, dg, du, dd = swiglu_backward(w_flat[slots, None] * g, c)
        grads["w_gate"][e] += dg
        grads["w_up"][e] += du
        grads["w_down"][e] += dd
        np.add.at(dx, tok, dh)
    if shared_cache is not None:
        dh, dg, du, dd = swiglu_backward(dy, shared_cache)
        dx += dh
        grads["shared"] = (dg, du, dd)
    if router is not None:
        dxr, dgate = router_backward(dweights.reshape(-1, topk), dz, x, router, out.router)
        dx += dxr
        grads["router"] = dgate
    return dx, grads


def moe_naive_loop(x, experts: LayerExperts, router_out: RouterOutput, dropped=None,
                   expert_input=None) -> np.ndarray:
    """Token-by-token reference: loops over every (token, slot) pair independently."""
    x = np.asarray(x, dtype=np.float64)
    xe = x if expert_input is None else np.asarray(expert_input, dtype=np.float64)
    y = np.zeros_like(xe)
    for n in range(xe.shape[0]):
        h = xe[n]
        for j, e in enumerate(router_out.selected[n]):
            if dropped is not None and dropped[n, j]:
                continue
            a = experts.w_gate[e] @ h
            b = experts.w_up[e] @ h
            act = a / (1.0 + np.exp(-a)) * b
            y[n] += router_out.weights[n, j] * (experts.w_down[e] @ act)
        if experts.shared is not None:
            wg, wu, wd = experts.shared
            a = wg @ h
            y[n] += wd @ (a / (1.0 + np.exp(-a)) * (wu @ h))
    return y
