"""Architecture design space, exact parameter accounting, FLOPs and memory proxy.

Counting conventions:

* tied embedding, counted once in both active and total counts
* attention: q/o projections ``d_model x (n_h d_h)``, k/v ``d_model x (n_kv d_h)``
* SwiGLU experts (gate, up, down), no biases
* RMS-style norm gains, two per layer plus one final
* the router (``d_model x routed_count``) is counted in both totals; a single
  routed expert with no shared expert is a plain dense FFN and has no router
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any

DEFAULT_VOCAB = 128_256
GB = 1e9


class ArchError(ValueError):
    """Invalid architecture configuration."""


class DispatchMode(str, Enum):
    DROP_AND_PAD = "drop-and-pad"
    DROPLESS = "dropless"


@dataclass(frozen=True)
class BaseArch:
    d_model: int
    d_ff: int
    n_h: int
    n_kv: int
    d_h: int
    n_l: int
    vocab_size: int = DEFAULT_VOCAB
    rope_theta: float = 500_000.0

    def __post_init__(self):
        for name in ("d_model", "d_ff", "n_h", "n_kv", "d_h", "n_l", "vocab_size"):
            if getattr(self, name) < 1:
                raise ArchError(f"{name} must be positive, got {getattr(self, name)}")
        if self.d_model != self.n_h * self.d_h:
            raise ArchError(
                f"d_model={self.d_model} != n_h*d_h={self.n_h}*{self.d_h}"
            )
        if self.n_h % self.n_kv:
            raise ArchError(f"n_h={self.n_h} not divisible by n_kv={self.n_kv}")


@dataclass(frozen=True)
class MoeSpec:
    """MoE design point.

    ``E`` coarse experts are each split into ``g`` fine experts of width
    ``d_ff / g``; each token activates ``g * k`` fine-expert units, of which
    ``shared_units`` are folded into one always-on shared expert.
    """

    E: int = 1
    g: int = 1
    k: int = 1
    shared: bool = False
    shared_units: int | None = None
    capacity_factor: float = 1.5
    dispatch_mode: DispatchMode = DispatchMode.DROPLESS

    def __post_init__(self):
        if self.shared_units is None:
            object.__setattr__(self, "shared_units", 4 if self.shared else 0)
        object.__setattr__(self, "dispatch_mode", DispatchMode(self.dispatch_mode))
        if self.E < 1 or self.g < 1 or self.k < 1:
            raise ArchError("E, g and k must all be >= 1")
        if self.k > self.E:
            raise ArchError(f"k={self.k} exceeds E={self.E}")
        if not self.shared and self.shared_units:
            raise ArchError("shared_units must be 0 without a shared expert")
        if self.shared and self.shared_units < 1:
            raise ArchError("a shared expert needs shared_units >= 1")
        if self.shared_units > self.g * self.k:
            raise ArchError(
                f"shared_units={self.shared_units} exceeds active units g*k={self.g * self.k}"
            )
        if self.routed_count >= 1 and self.routed_topk < 1:
            raise ArchError("routed_topk must be >= 1 when routed experts exist")
        if self.capacity_factor <= 0:
            raise ArchError("capacity_factor must be positive")

    @property
    def n_fine_total(self) -> int:
        return self.g * self.E

    @property
    def routed_count(self) -> int:
        return self.g * self.E - self.shared_units

    @property
    def routed_topk(self) -> int:
        return self.g * self.k - self.shared_units

    @property
    def is_dense(self) -> bool:
        return self.E == 1 and self.g == 1 and not self.shared

    @property
    def has_router(self) -> bool:
        return not (self.routed_count == 1 and not self.shared)

    def expert_width(self, base: BaseArch) -> int:
        if base.d_ff % self.g:
            raise ArchError(f"d_ff={base.d_ff} not divisible by g={self.g}")
        return base.d_ff // self.g


@dataclass(frozen=True)
class ParamCounts:
    n_act: int
    n_total: int
    breakdown: dict[str, int] = field(default_factory=dict)
    active_breakdown: dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return {
            "n_act": self.n_act,
            "n_total": self.n_total,
            "breakdown": dict(self.breakdown),
            "active_breakdown": dict(self.active_breakdown),
        }


@dataclass(frozen=True)
class MemoryBudget:
    b_w: int = 4
    b_kv: int = 8
    T: int = 8192
    M: float = 5.0

    def __post_init__(self):
        if self.b_w not in (4, 8, 16):
            raise ArchError(f"b_w must be 4, 8 or 16, got {self.b_w}")
        if self.b_kv not in (8, 16):
            raise ArchError(f"b_kv must be 8 or 16, got {self.b_kv}")
        if self.T < 0:
            raise ArchError("context length T must be >= 0")
        if self.M <= 0:
            raise ArchError("memory budget M must be positive")


@dataclass(frozen=True)
class MemoryReport:
    weight_gb: float
    kv_gb: float
    total_gb: float
    budget_gb: float

    @property
    def feasible(self) -> bool:
        return self.total_gb <= self.budget_gb


def count_params(base: BaseArch, moe: MoeSpec) -> ParamCounts:
    f = moe.expert_width(base)
    d = base.d_model
    emb = base.vocab_size * d
    attn = base.n_l * (
        d * (base.n_h * base.d_h) * 2 + 2 * d * (base.n_kv * base.d_h)
    )
    router = base.n_l * d * moe.routed_count if moe.has_router else 0
    fine = 3 * d * f
    routed_total = base.n_l * fine * moe.routed_count
    routed_active = base.n_l * fine * moe.routed_topk
    shared = base.n_l * 3 * d * (moe.shared_units * f)
    norms = (2 * base.n_l + 1) * d

    total = {
        "embedding": emb,
        "attention": attn,
        "router": router,
        "routed_experts": routed_total,
        "shared_expert": shared,
        "norms": norms,
    }
    active = dict(total, routed_experts=routed_active)
    return ParamCounts(
        n_act=sum(active.values()),
        n_total=sum(total.values()),
        breakdown=total,
        active_breakdown=active,
    )


def inference_flops(counts: ParamCounts) -> float:
    """Forward FLOPs per token, ``2 * n_act``."""
    return 2.0 * counts.n_act


def training_flops(counts: ParamCounts | float, d_tokens: float) -> float:
    """Training FLOPs ``6 * n_act * D``. ``counts`` may also be a raw n_act."""
    if d_tokens < 0:
        raise ArchError("d_tokens must be >= 0")
    n_act = counts.n_act if isinstance(counts, ParamCounts) else counts
    return 6.0 * n_act * d_tokens


def kv_cache_bytes(base: BaseArch, b_kv: int, T: int) -> float:
    return (b_kv / 8) * 2 * T * base.n_l * base.n_kv * base.d_h


def memory_proxy(
    counts: ParamCounts | int, base: BaseArch, budget: MemoryBudget
) -> MemoryReport:
    """Static weights plus KV cache, in decimal GB."""
    n_total = counts.n_total if isinstance(counts, ParamCounts) else counts
    weight = (budget.b_w / 8) * n_total / GB
    kv = kv_cache_bytes(base, budget.b_kv, budget.T) / GB
    return MemoryReport(weight, kv, weight + kv, budget.M)


# Published backbones; all three share the deployed MoE design below.
PRESETS: dict[str, BaseArch] = {
    "S": BaseArch(768, 3072, 12, 4, 64, 20),
    "M": BaseArch(1024, 4096, 16, 4, 64, 26),
    "L": BaseArch(1280, 5120, 20, 4, 64, 32),
}
DEPLOYED_MOE = MoeSpec(E=8, g=8, k=1, shared=True, shared_units=4)


# -- config files -----------------------------------------------------------

def arch_to_dict(base: BaseArch, moe: MoeSpec) -> dict[str, Any]:
    return {
        "backbone": asdict(base),
        "moe": {
            "e": moe.E,
            "g": moe.g,
            "k": moe.k,
            "shared": moe.shared,
            "shared_units": moe.shared_units,
            "capacity_factor": moe.capacity_factor,
            "dispatch": moe.dispatch_mode.value,
        },
    }


def arch_from_dict(obj: dict[str, Any]) -> tuple[BaseArch, MoeSpec]:
    try:
        bb = obj["backbone"]
        base = BaseArch(
            d_model=int(bb["d_model"]),
            d_ff=int(bb["d_ff"]),
            n_h=int(bb["n_h"]),
            n_kv=int(bb["n_kv"]),
            d_h=int(bb["d_h"]),
            n_l=int(bb["n_l"]),
            vocab_size=int(bb.get("vocab_size", DEFAULT_VOCAB)),
            rope_theta=float(bb.get("rope_theta", 500_000.0)),
        )
        m = obj.get("moe", {})
        moe = MoeSpec(
            E=int(m.get("e", 1)),
            g=int(m.get("g", 1)),
            k=int(m.get("k", 1)),
            shared=bool(m.get("shared", False)),
            shared_units=m.get("shared_units"),
            capacity_factor=float(m.get("capacity_factor", 1.5)),
            dispatch_mode=m.get("dispatch", "dropless"),
        )
    except (KeyError, TypeError) as exc:
        raise ArchError(f"malformed architecture config: {exc}") from exc
    moe.expert_width(base)
    return base, moe


def load_arch(path: str | Path) -> tuple[BaseArch, MoeSpec]:
    with open(path) as fh:
        return arch_from_dict(json.load(fh))


def save_arch(path: str | Path, base: BaseArch, moe: MoeSpec) -> None:
    with open(path, "w") as fh:
        json.dump(arch_to_dict(base, moe), fh, indent=2)
