"""AdamW training step with global-norm clipping, z-loss, optional QAT, and bias balancing."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..quant import fake_quant_ste, is_quantizable
from .transformer import ModelWeights, cross_entropy, loss_and_grads, transformer_forward


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainHyper:
    lr: float = 3e-3
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-15
    weight_decay: float = 0.1
    clip_norm: float = 1.0
    lambda_z: float | None = None  # None -> model.lambda_z
    qat: bool = False
    update_bias: bool = True


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


@dataclass
class StepResult:
    loss: float
    cross_entropy: float
    grad_norm: float
    loads: np.ndarray


def global_norm(grads: dict[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


def clip_grads(grads: dict[str, np.ndarray], max_norm: float = 1.0):
    """Scale all gradients by one factor so their global norm is at most ``max_norm``."""
    norm = global_norm(grads)
    if norm > max_norm:
        k = max_norm / norm
        grads = {n: g * k for n, g in grads.items()}
    return grads, norm


def adamw_update(params, grads, state: AdamState, hp: TrainHyper) -> None:
    state.step += 1
    t = state.step
    bc1 = 1.0 - hp.beta1**t
    bc2 = 1.0 - hp.beta2**t
    for name, g in grads.items():
        p = params[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= hp.beta1
        m += (1 - hp.beta1) * g
        v *= hp.beta2
        v += (1 - hp.beta2) * g * g
        if p.ndim >= 2 and hp.weight_decay:
            p *= 1.0 - hp.lr * hp.weight_decay
        p -= hp.lr * (m / bc1) / (np.sqrt(v / bc2) + hp.eps)


def fake_quant_params(params: dict[str, np.ndarray]):
    """Fake-quantized copy of every quantizable weight plus the straight-through masks."""
    out, masks = dict(params), {}
    for name, arr in params.items():
        if is_quantizable(name, arr):
            fq = fake_quant_ste(arr)
            out[name] = fq.value
            masks[name] = fq.grad_mask
    return out, masks


def train_step(model: ModelWeights, inputs, targets, state: AdamState,
               hp: TrainHyper | None = None) -> StepResult:
    """One optimizer step in place; the balance bias moves after the update from this batch's load."""
    hp = hp or TrainHyper()
    masks = None
    params = None
    if hp.qat:
        params, masks = fake_quant_params(model.params)
    total, ce, grads, fr = loss_and_grads(model, inputs, targets, hp.lambda_z, params=params)
    if not np.isfinite(total):
        raise TrainingError(f"non-finite loss at step {state.step + 1}: total={total}, ce={ce}")
    if masks:
        grads = {n: g * masks[n] if n in masks else g for n, g in grads.items()}
    grads, norm = clip_grads(grads, hp.clip_norm)
    if not np.isfinite(norm):
        raise TrainingError(f"non-finite gradient norm at step {state.step + 1}")
    adamw_update(model.params, grads, state, hp)
    if hp.update_bias:
        for l, load in enumerate(fr.loads):
            model.update_balance(l, load)
    return StepResult(total, ce, norm, fr.loads)


def balance_steps(model: ModelWeights, batches, params: dict | None = None) -> list[np.ndarray]:
    """Gradient-free bias updates only: forward each batch, then nudge every layer's bias."""
    history = []
    for tokens in batches:
        fr = transformer_forward(tokens, model, params=params)
        for l, load in enumerate(fr.loads):
            model.update_balance(l, load)
        history.append(fr.loads)
    return history


def memorize(model: ModelWeights, sequence, steps: int = 200, hp: TrainHyper | None = None,
             state: AdamState | None = None) -> list[float]:
    """Next-token training on one fixed sequence; returns the cross-entropy per step."""
    seq = np.asarray(sequence)
    state = state or AdamState()
    return [train_step(model, seq[:-1], seq[1:], state, hp).cross_entropy for _ in range(steps)]


def eval_cross_entropy(model: ModelWeights, sequence, params: dict | None = None) -> float:
    seq = np.asarray(sequence)
    logits = transformer_forward(seq[:-1], model, params=params).logits
    return cross_entropy(logits, seq[1:])[0]
