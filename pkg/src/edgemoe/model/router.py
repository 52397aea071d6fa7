"""Sigmoid top-k router with selection-only balance biases, and token dispatch plans."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from ..arch import DispatchMode
from .layers import sigmoid

LAMBDA_LB = 1e-3
LAMBDA_Z = 1e-4


class RoutingError(ValueError):
    pass


@dataclass
class RouterState:
    gate_matrix: np.ndarray  # (routed_count, d_model), float64
    balance_bias: np.ndarray  # (routed_count,)
    lambda_lb: float = LAMBDA_LB
    lambda_z: float = LAMBDA_Z

    def __post_init__(self):
        self.gate_matrix = np.asarray(self.gate_matrix, dtype=np.float64)
        self.balance_bias = np.asarray(self.balance_bias, dtype=np.float64)

    @property
    def n_experts(self) -> int:
        return self.gate_matrix.shape[0]


@dataclass
class RouterOutput:
    selected: np.ndarray  # (N, topk) int
    weights: np.ndarray  # (N, topk), rows sum to 1
    z_loss: float
    raw_scores: np.ndarray  # (N, R) sigmoid scores
    logits: np.ndarray = field(repr=False, default=None)


def select_topk(values: np.ndarray, topk: int) -> np.ndarray:
    """Indices of the ``topk`` largest entries per row; ties go to the lower index."""
    order = np.argsort(-values, axis=-1, kind="stable")
    return order[..., :topk]


def router_forward(x, state: RouterState, topk: int, forced_selection=None) -> RouterOutput:
    """Route rows of ``x`` (N, d).

    Scores are independent sigmoids of the logits. The balance bias shifts
    scores for *selection only*; combination weights renormalize the raw
    scores of the chosen experts. ``forced_selection`` pins the chosen experts
    (used for gradient checks with frozen routing).
    """
    R = state.n_experts
    if not 1 <= topk <= R:
        raise RoutingError(f"topk={topk} outside [1, {R}]")
    x = np.asarray(x, dtype=np.float64)
    logits = x @ state.gate_matrix.T
    scores = sigmoid(logits)
    if forced_selection is None:
        selected = select_topk(scores + state.balance_bias, topk)
    else:
        selected = np.asarray(forced_selection, dtype=np.int64)
        if selected.shape != (x.shape[0], topk):
            raise RoutingError("forced selection has the wrong shape")
    picked = np.take_along_axis(scores, selected, axis=-1)
    weights = picked / picked.sum(axis=-1, keepdims=True)
    lse = logsumexp(logits, axis=-1)
    z_loss = float(np.mean(lse**2)) if len(lse) else 0.0
    return RouterOutput(selected, weights, z_loss, scores, logits)


def router_backward(dweights, dz, x, state: RouterState, out: RouterOutput):
    """Gradients of the gate matrix and of ``x`` through weights and z-loss.

    ``dweights`` is (N, topk); ``dz`` is the upstream gradient of ``z_loss``.
    """
    s_sel = np.take_along_axis(out.raw_scores, out.selected, axis=-1)
    total = s_sel.sum(axis=-1, keepdims=True)
    ds_sel = (dweights - np.sum(dweights * out.weights, axis=-1, keepdims=True)) / total
    dlogits = np.zeros_like(out.logits)
    np.put_along_axis(dlogits, out.selected, ds_sel * s_sel * (1.0 - s_sel), axis=-1)
    if dz:
        n = out.logits.shape[0]
        lse = logsumexp(out.logits, axis=-1, keepdims=True)
        soft = np.exp(out.logits - lse)
        dlogits += dz * 2.0 * lse * soft / n
    d_gate = dlogits.T @ x
    dx = dlogits @ state.gate_matrix
    return dx, d_gate


def update_balance_bias(state: RouterState, load) -> np.ndarray:
    """``b_i += lambda_lb * sign(mean(load) - load_i)``; overloaded experts become less attractive."""
    load = np.asarray(load, dtype=np.float64)
    if load.shape != state.balance_bias.shape:
        raise RoutingError("load vector length must equal the routed expert count")
    state.balance_bias = state.balance_bias + state.lambda_lb * np.sign(load.mean() - load)
    return state.balance_bias


# -- dispatch -----------------------------------------------------------------

@dataclass
class DispatchPlan:
    """Kept (token, slot) pairs grouped by expert.

    ``permutation`` holds flat slot ids ``token * topk + j`` ordered by expert and,
    within an expert, by token position. Expert ``e`` owns
    ``permutation[offsets[e]:offsets[e + 1]]``.
    """

    permutation: np.ndarray
    offsets: np.ndarray
    dropped: np.ndarray  # (N, topk) bool
    capacity: int
    topk: int
    mode: DispatchMode

    @property
    def counts(self) -> np.ndarray:
        return np.diff(self.offsets)

    def expert_slots(self, e: int) -> np.ndarray:
        return self.permutation[self.offsets[e]:self.offsets[e + 1]]


def drop_and_pad_capacity(capacity_factor: float, n_tokens: int, topk: int, n_experts: int) -> int:
    return math.ceil(capacity_factor * n_tokens * topk / n_experts)


def build_dispatch(selected, n_experts: int, mode=DispatchMode.DROPLESS,
                   capacity_factor: float = 1.5) -> DispatchPlan:
    """Group routing slots by expert; drop-and-pad keeps the earliest tokens up to capacity."""
    mode = DispatchMode(mode)
    selected = np.asarray(selected, dtype=np.int64)
    n_tokens, topk = selected.shape if selected.ndim == 2 else (0, 1)
    flat = selected.reshape(-1)
    if flat.size and (flat.min() < 0 or flat.max() >= n_experts):
        raise RoutingError("expert id out of range")
    order = np.argsort(flat, kind="stable")
    counts = np.bincount(flat, minlength=n_experts)
    starts = np.concatenate([[0], np.cumsum(counts)])
    dropped = np.zeros(flat.size, dtype=bool)
    if mode is DispatchMode.DROP_AND_PAD:
        cap = drop_and_pad_capacity(capacity_factor, n_tokens, topk, n_experts)
        for e in range(n_experts):
            dropped[order[starts[e] + cap:starts[e + 1]]] = True
    else:
        cap = int(counts.max()) if counts.size else 0
    kept = order[~dropped[order]]
    kept_counts = np.bincount(flat[kept], minlength=n_experts)
    offsets = np.concatenate([[0], np.cumsum(kept_counts)]).astype(np.int64)
    return DispatchPlan(kept, offsets, dropped.reshape(n_tokens, topk), cap, topk, mode)
