"""On-device mixture-of-experts toolkit.

Scaling-law fitting and constrained architecture search, exact parameter and
memory accounting, a toy numpy MoE transformer, INT4/INT8 quantization, and a
fused sort-then-grouped-GEMM inference path.
"""

from .arch import (
    DEPLOYED_MOE,
    PRESETS,
    ArchError,
    BaseArch,
    DispatchMode,
    MemoryBudget,
    MoeSpec,
    ParamCounts,
    count_params,
    inference_flops,
    memory_proxy,
    training_flops,
)
from .scaling import (
    CandidateGrid,
    ExpertTransform,
    ScalingCoeffs,
    fit,
    frontier_sweep,
    load_fixture,
    optimize_architecture,
    predict_loss,
)

__version__ = "0.1.0"

__all__ = [
    "DEPLOYED_MOE", "PRESETS", "ArchError", "BaseArch", "CandidateGrid", "DispatchMode",
    "ExpertTransform", "MemoryBudget", "MoeSpec", "ParamCounts", "ScalingCoeffs",
    "count_params", "fit", "frontier_sweep", "inference_flops", "load_fixture",
    "memory_proxy", "optimize_architecture", "predict_loss", "training_flops",
]
