"""Forward/backward primitives: RMSNorm, rotary embeddings, causal GQA attention, SwiGLU.

Linear weights are stored ``(out_features, in_features)`` and applied as ``x @ W.T``.
Each ``*_forward`` returns ``(out, cache)``; the matching ``*_backward`` takes the
upstream gradient and the cache and returns the input gradient plus parameter grads.
"""

from __future__ import annotations

import numpy as np

RMS_EPS = 1e-6


def rmsnorm_forward(x, gain, eps=RMS_EPS):
    r = 1.0 / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps)
    return x * r * gain, (x, r, gain)


def rmsnorm_backward(dy, cache):
    x, r, gain = cache
    dxhat = dy * gain
    d = x.shape[-1]
    dx = r * dxhat - (r**3) * x * np.sum(dxhat * x, axis=-1, keepdims=True) / d
    dgain = np.sum((dy * x * r).reshape(-1, d), axis=0)
    return dx, dgain


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def silu(x):
    return x * sigmoid(x)


# -- rotary -------------------------------------------------------------------

def rope_tables(positions, d_h, theta):
    half = d_h // 2
    inv_freq = theta ** (-np.arange(half, dtype=np.float64) * 2.0 / d_h)
    ang = np.asarray(positions, dtype=np.float64)[:, None] * inv_freq[None, :]
    cos = np.concatenate([np.cos(ang)] * 2, axis=-1)
    sin = np.concatenate([np.sin(ang)] * 2, axis=-1)
    return cos, sin


def _rotate_half(x):
    h = x.shape[-1] // 2
    return np.concatenate([-x[..., h:], x[..., :h]], axis=-1)


def _rotate_half_t(x):
    h = x.shape[-1] // 2
    return np.concatenate([x[..., h:], -x[..., :h]], axis=-1)


def apply_rope(x, cos, sin):
    """``x`` is (B, T, heads, d_h); tables are (T, d_h)."""
    c = cos[None, :, None, :]
    s = sin[None, :, None, :]
    return x * c + _rotate_half(x) * s


def apply_rope_backward(dy, cos, sin):
    c = cos[None, :, None, :]
    s = sin[None, :, None, :]
    return dy * c + _rotate_half_t(dy * s)


# -- attention ----------------------------------------------------------------

def attention_forward(x, wq, wk, wv, wo, n_h, n_kv, d_h, theta, cache=None, layer=0):
    """Causal grouped-query attention over ``x`` of shape (B, T, d).

    With a KV cache, ``x`` holds the new tokens only and their keys/values are appended.
    """
    B, T, _ = x.shape
    rep = n_h // n_kv
    start = cache.length if cache is not None else 0
    cos, sin = rope_tables(np.arange(start, start + T), d_h, theta)
    q = apply_rope((x @ wq.T).reshape(B, T, n_h, d_h), cos, sin)
    k = apply_rope((x @ wk.T).reshape(B, T, n_kv, d_h), cos, sin)
    v = (x @ wv.T).reshape(B, T, n_kv, d_h)
    if cache is not None:
        k, v = cache.append(layer, k, v)
    S = k.shape[1]
    qg = q.reshape(B, T, n_kv, rep, d_h)
    scores = np.einsum("btgrd,bsgd->bgrts", qg, k) / np.sqrt(d_h)
    qpos = np.arange(start, start + T)[:, None]
    mask = np.arange(S)[None, :] > qpos
    scores = np.where(mask, -np.inf, scores)
    scores = scores - scores.max(axis=-1, keepdims=True)
    p = np.exp(scores)
    p /= p.sum(axis=-1, keepdims=True)
    attn = np.einsum("bgrts,bsgd->btgrd", p, v).reshape(B, T, n_h * d_h)
    out = attn @ wo.T
    return out, (x, qg, k, v, p, attn, cos, sin, wq, wk, wv, wo)


def attention_backward(dy, cache):
    x, qg, k, v, p, attn, cos, sin, wq, wk, wv, wo = cache
    B, T, n_kv, rep, d_h = qg.shape
    d = x.shape[-1]
    grads = {
        "wo": dy.reshape(-1, dy.shape[-1]).T @ attn.reshape(-1, attn.shape[-1]),
    }
    dattn = (dy @ wo).reshape(B, T, n_kv, rep, d_h)
    dp = np.einsum("btgrd,bsgd->bgrts", dattn, v)
    dv = np.einsum("bgrts,btgrd->bsgd", p, dattn)
    ds = p * (dp - np.sum(dp * p, axis=-1, keepdims=True)) / np.sqrt(d_h)
    dq = np.einsum("bgrts,bsgd->btgrd", ds, k).reshape(B, T, n_kv * rep, d_h)
    dk = np.einsum("bgrts,btgrd->bsgd", ds, qg)
    dq = apply_rope_backward(dq, cos, sin).reshape(B, T, -1)
    dk = apply_rope_backward(dk, cos, sin).reshape(B, T, -1)
    dv = dv.reshape(B, T, -1)
    xf = x.reshape(-1, d)
    grads["wq"] = dq.reshape(-1, dq.shape[-1]).T @ xf
    grads["wk"] = dk.reshape(-1, dk.shape[-1]).T @ xf
    grads["wv"] = dv.reshape(-1, dv.shape[-1]).T @ xf
    dx = dq @ wq + dk @ wk + dv @ wv
    return dx, grads


# -- SwiGLU -------------------------------------------------------------------

def swiglu_ffn(h, w_gate, w_up, w_down):
    """``down(silu(gate h) * up h)`` with gate and up evaluated as one GEMM."""
    f = w_gate.shape[0]
    gu = h @ np.concatenate([w_gate, w_up], axis=0).T
    return (silu(gu[:, :f]) * gu[:, f:]) @ w_down.T


def swiglu_forward(h, w_gate, w_up, w_down):
    f = w_gate.shape[0]
    gu = h @ np.concatenate([w_gate, w_up], axis=0).T
    a, b = gu[:, :f], gu[:, f:]
    sa = sigmoid(a)
    act = a * sa * b
    return act @ w_down.T, (h, a, b, sa, act, w_gate, w_up, w_down)


def swiglu_backward(dout, cache):
    h, a, b, sa, act, w_gate, w_up, w_down = cache
    d_down = dout.T @ act
    dact = dout @ w_down
    da = dact * b * sa * (1.0 + a * (1.0 - sa))
    db = dact * a * sa
    d_gate = da.T @ h
    d_up = db.T @ h
    dh = da @ w_gate + db @ w_up
    return dh, d_gate, d_up, d_down
