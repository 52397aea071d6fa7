"""Toy MoE transformer: layers, routing, dispatch, training and utilization."""

from .moe import LayerExperts, MoeOutput, moe_backward, moe_combine, moe_forward, moe_naive_loop
from .router import (
    LAMBDA_LB,
    LAMBDA_Z,
    DispatchPlan,
    RouterOutput,
    RouterState,
    RoutingError,
    build_dispatch,
    drop_and_pad_capacity,
    router_forward,
    update_balance_bias,
)
from .train import AdamState, TrainHyper, TrainingError, balance_steps, clip_grads, memorize, train_step
from .transformer import (
    KVCache,
    ModelError,
    ModelWeights,
    cross_entropy,
    generate,
    init_model,
    loss_and_grads,
    transformer_forward,
)
from .utilization import Utilization, expert_utilization

__all__ = [
    "LAMBDA_LB", "LAMBDA_Z", "AdamState", "DispatchPlan", "KVCache", "LayerExperts",
    "ModelError", "ModelWeights", "MoeOutput", "RouterOutput", "RouterState", "RoutingError",
    "TrainHyper", "TrainingError", "Utilization", "balance_steps", "build_dispatch",
    "clip_grads", "cross_entropy", "drop_and_pad_capacity", "expert_utilization", "generate",
    "init_model", "loss_and_grads", "memorize", "moe_backward", "moe_combine", "moe_forward",
    "moe_naive_loop", "router_forward", "train_step", "transformer_forward",
    "update_balance_bias",
]
