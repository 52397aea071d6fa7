"""Pre-norm decoder-only transformer with MoE feed-forward blocks and tied embeddings."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from ..arch import BaseArch, DispatchMode, MoeSpec
from ..quant import QuantizedTensor
from .layers import (
    attention_backward,
    attention_forward,
    rmsnorm_backward,
    rmsnorm_forward,
)
from .moe import LayerExperts, MoeOutput, moe_backward, moe_forward
from .router import LAMBDA_LB, LAMBDA_Z, RouterState, update_balance_bias


class ModelError(ValueError):
    pass


def _layer_names(l: int) -> dict[str, str]:
    p = f"layers.{l}"
    return {
        "attn_norm": f"{p}.attn_norm",
        "wq": f"{p}.attn.wq",
        "wk": f"{p}.attn.wk",
        "wv": f"{p}.attn.wv",
        "wo": f"{p}.attn.wo",
        "ffn_norm": f"{p}.ffn_norm",
        "router": f"{p}.router",
        "w_gate": f"{p}.experts.w_gate",
        "w_up": f"{p}.experts.w_up",
        "w_down": f"{p}.experts.w_down",
        "s_gate": f"{p}.shared.w_gate",
        "s_up": f"{p}.shared.w_up",
        "s_down": f"{p}.shared.w_down",
    }


@dataclass
class ModelWeights:
    base: BaseArch
    moe: MoeSpec
    params: dict[str, np.ndarray]
    balance_bias: list[np.ndarray]
    lambda_lb: float = LAMBDA_LB
    lambda_z: float = LAMBDA_Z
    quantized: dict[str, QuantizedTensor] = field(default_factory=dict)

    def names(self, l: int) -> dict[str, str]:
        return _layer_names(l)

    def router_state(self, l: int, params=None) -> RouterState | None:
        if not self.moe.has_router:
            return None
        p = self.params if params is None else params
        return RouterState(p[f"layers.{l}.router"], self.balance_bias[l],
                           self.lambda_lb, self.lambda_z)

    def experts(self, l: int, params=None) -> LayerExperts:
        p = self.params if params is None else params
        n = _layer_names(l)
        shared = None
        if self.moe.shared:
            shared = (p[n["s_gate"]], p[n["s_up"]], p[n["s_down"]])
        return LayerExperts(p[n["w_gate"]], p[n["w_up"]], p[n["w_down"]], shared)

    def update_balance(self, l: int, load) -> None:
        state = self.router_state(l)
        if state is not None:
            self.balance_bias[l] = update_balance_bias(state, load)

    def copy(self) -> "ModelWeights":
        return ModelWeights(
            self.base, self.moe,
            {k: v.copy() for k, v in self.params.items()},
            [b.copy() for b in self.balance_bias],
            self.lambda_lb, self.lambda_z, dict(self.quantized),
        )

    @property
    def routed_count(self) -> int:
        return self.moe.routed_count

    @property
    def topk(self) -> int:
        return self.moe.routed_topk


def init_model(base: BaseArch, moe: MoeSpec, seed: int = 0, std: float = 0.02,
               dtype=np.float64) -> ModelWeights:
    """Random init; each layer draws from its own child of one seed sequence."""
    f = moe.expert_width(base)
    d = base.d_model
    R = moe.routed_count
    children = np.random.SeedSequence(seed).spawn(base.n_l + 1)
    top = np.random.default_rng(children[-1])
    out_std = std / np.sqrt(2 * base.n_l)
    params = {
        "embed": top.normal(0, std, (base.vocab_size, d)).astype(dtype),
        "norm": np.ones(d, dtype),
    }
    for l in range(base.n_l):
        rng = np.random.default_rng(children[l])
        n = _layer_names(l)
        params[n["attn_norm"]] = np.ones(d, dtype)
        params[n["wq"]] = rng.normal(0, std, (base.n_h * base.d_h, d)).astype(dtype)
        params[n["wk"]] = rng.normal(0, std, (base.n_kv * base.d_h, d)).astype(dtype)
        params[n["wv"]] = rng.normal(0, std, (base.n_kv * base.d_h, d)).astype(dtype)
        params[n["wo"]] = rng.normal(0, out_std, (d, base.n_h * base.d_h)).astype(dtype)
        params[n["ffn_norm"]] = np.ones(d, dtype)
        if moe.has_router:
            params[n["router"]] = rng.normal(0, std, (R, d)).astype(np.float64)
        params[n["w_gate"]] = rng.normal(0, std, (R, f, d)).astype(dtype)
        params[n["w_up"]] = rng.normal(0, std, (R, f, d)).astype(dtype)
        params[n["w_down"]] = rng.normal(0, out_std, (R, d, f)).astype(dtype)
        if moe.shared:
            fs = moe.shared_units * f
            params[n["s_gate"]] = rng.normal(0, std, (fs, d)).astype(dtype)
            params[n["s_up"]] = rng.normal(0, std, (fs, d)).astype(dtype)
            params[n["s_down"]] = rng.normal(0, out_std, (d, fs)).astype(dtype)
    bias = [np.zeros(R) for _ in range(base.n_l)]
    return ModelWeights(base, moe, params, bias)


class KVCache:
    """Per-layer post-rotary keys and values for incremental decoding."""

    def __init__(self, n_layers: int):
        self.k: list[np.ndarray | None] = [None] * n_layers
        self.v: list[np.ndarray | None] = [None] * n_layers
        self.length = 0

    def append(self, layer: int, k, v):
        if self.k[layer] is None:
            self.k[layer], self.v[layer] = k, v
        else:
            self.k[layer] = np.concatenate([self.k[layer], k], axis=1)
            self.v[layer] = np.concatenate([self.v[layer], v], axis=1)
        return self.k[layer], self.v[layer]

    def advance(self, n: int) -> None:
        self.length += n

    def nbytes(self) -> int:
        return sum(a.nbytes for a in self.k + self.v if a is not None)


# Signature of a pluggable MoE block: (model, layer, x (N, d)) -> MoeOutput
MoeFn = Callable[["ModelWeights", int, np.ndarray], MoeOutput]


@dataclass
class ForwardResult:
    logits: np.ndarray
    z_loss: float
    z_losses: list[float]
    loads: np.ndarray  # (n_l, routed_count)
    moe_outputs: list[MoeOutput]
    tape: list | None = None


def transformer_forward(tokens, model: ModelWeights, cache: KVCache | None = None,
                        moe_fn: MoeFn | None = None, forced_selection=None,
                        params: dict | None = None, keep_tape: bool = False,
                        mode: DispatchMode | None = None) -> ForwardResult:
    """Logits for ``tokens`` of shape (T,) or (B, T).

    With ``cache``, ``tokens`` are the new positions only; keys and values are
    appended and the cache advances. ``params`` overrides model parameters
    (e.g. fake-quantized copies for QAT). ``forced_selection`` is a per-layer
    list of (N, topk) expert ids that freezes routing.
    """
    base = model.base
    p = model.params if params is None else params
    tokens = np.asarray(tokens)
    squeeze = tokens.ndim == 1
    if squeeze:
        tokens = tokens[None, :]
    if tokens.size and (tokens.min() < 0 or tokens.max() >= base.vocab_size):
        raise ModelError("token id outside the vocabulary")
    if keep_tape and cache is not None:
        raise ModelError("backward through a KV cache is not supported")
    mode = DispatchMode(mode or model.moe.dispatch_mode)
    B, T = tokens.shape
    d = base.d_model
    h = p["embed"][tokens].astype(np.float64)
    tape = []
    z_losses, loads, outs = [], [], []
    for l in range(base.n_l):
        n = _layer_names(l)
        a, c_an = rmsnorm_forward(h, p[n["attn_norm"]])
        att, c_att = attention_forward(
            a, p[n["wq"]], p[n["wk"]], p[n["wv"]], p[n["wo"]],
            base.n_h, base.n_kv, base.d_h, base.rope_theta, cache, l,
        )
        h = h + att
        m, c_fn = rmsnorm_forward(h, p[n["ffn_norm"]])
        flat = m.reshape(B * T, d)
        if moe_fn is not None:
            mo = moe_fn(model, l, flat)
        else:
            fs = None if forced_selection is None else forced_selection[l]
            mo = moe_forward(
                flat, model.experts(l, p), model.router_state(l, p), model.topk,
                mode, model.moe.capacity_factor, fs, keep_cache=keep_tape,
            )
        h = h + mo.y.reshape(B, T, d)
        z_losses.append(mo.router.z_loss)
        loads.append(mo.load)
        outs.append(mo)
        if keep_tape:
            tape.append((c_an, c_att, c_fn))
    hn, c_final = rmsnorm_forward(h, p["norm"])
    logits = hn @ p["embed"].T
    if cache is not None:
        cache.advance(T)
    if keep_tape:
        tape.append((c_final, hn, tokens))
    if squeeze:
        logits = logits[0]
    return ForwardResult(logits, float(sum(z_losses)), z_losses, np.array(loads), outs,
                         tape if keep_tape else None)


def transformer_backward(dlogits, fr: ForwardResult, model: ModelWeights, dz: float,
                         params: dict | None = None) -> dict[str, np.ndarray]:
    """Parameter gradients given d(loss)/d(logits) and d(loss)/d(each layer's z-loss)."""
    p = model.params if params is None else params
    base = model.base
    d = base.d_model
    c_final, hn, tokens = fr.tape[-1]
    if dlogits.ndim == 2:
        dlogits = dlogits[None]
    B, T, _ = dlogits.shape
    grads: dict[str, np.ndarray] = {}
    grads["embed"] = dlogits.reshape(-1, dlogits.shape[-1]).T @ hn.reshape(-1, d)
    dh, grads["norm"] = rmsnorm_backward(dlogits @ p["embed"], c_final)
    for l in reversed(range(base.n_l)):
        n = _layer_names(l)
        c_an, c_att, c_fn = fr.tape[l]
        mo = fr.moe_outputs[l]
        dm, eg = moe_backward(dh.reshape(B * T, d), mo, model.experts(l, p), dz)
        grads[n["w_gate"]], grads[n["w_up"]], grads[n["w_down"]] = eg["w_gate"], eg["w_up"], eg["w_down"]
        if "shared" in eg:
            grads[n["s_gate"]], grads[n["s_up"]], grads[n["s_down"]] = eg["shared"]
        if "router" in eg:
            grads[n["router"]] = eg["router"]
        dx, grads[n["ffn_norm"]] = rmsnorm_backward(dm.reshape(B, T, d), c_fn)
        dh = dh + dx
        da, ag = attention_backward(dh, c_att)
        for k in ("wq", "wk", "wv", "wo"):
            grads[n[k]] = ag[k]
        dx, grads[n["attn_norm"]] = rmsnorm_backward(da, c_an)
        dh = dh + dx
    np.add.at(grads["embed"], tokens.reshape(-1), dh.reshape(-1, d))
    return grads


def cross_entropy(logits, targets):
    """Mean token cross-entropy and its gradient w.r.t. logits."""
    flat = logits.reshape(-1, logits.shape[-1])
    t = np.asarray(targets).reshape(-1)
    shifted = flat - flat.max(axis=-1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    loss = -float(np.mean(logp[np.arange(t.size), t]))
    grad = np.exp(logp)
    grad[np.arange(t.size), t] -= 1.0
    return loss, (grad / t.size).reshape(logits.shape)


def loss_and_grads(model: ModelWeights, inputs, targets, lambda_z: float | None = None,
                   forced_selection=None, params: dict | None = None):
    """Total loss ``CE + lambda_z * sum_l z_loss_l`` with gradients for every parameter."""
    lam = model.lambda_z if lambda_z is None else lambda_z
    fr = transformer_forward(inputs, model, forced_selection=forced_selection,
                             params=params, keep_tape=True)
    ce, dlogits = cross_entropy(fr.logits, targets)
    total = ce + lam * fr.z_loss
    grads = transformer_backward(dlogits, fr, model, lam, params)
    return total, ce, grads, fr


def generate(model: ModelWeights, prompt, n_new: int, temperature: float = 0.0,
             rng: np.random.Generator | None = None, moe_fn: MoeFn | None = None) -> list[int]:
    """Greedy (``temperature=0``) or sampled continuation using the KV cache."""
    prompt = [int(t) for t in prompt]
    if not prompt:
        raise ModelError("prompt must contain at least one token")
    rng = rng or np.random.default_rng(0)
    cache = KVCache(model.base.n_l)
    logits = transformer_forward(np.array(prompt), model, cache, moe_fn).logits[-1]
    out = []
    for _ in range(n_new):
        if temperature > 0:
            z = logits / temperature
            pr = np.exp(z - z.max())
            nxt = int(rng.choice(pr.size, p=pr / pr.sum()))
        else:
            nxt = int(np.argmax(logits))
        out.append(nxt)
        logits = transformer_forward(np.array([nxt]), model, cache, moe_fn).logits[-1]
    return out
