"""Expert-aware parametric scaling law, fitting, and constrained architecture search.

The loss surface is::

    L(N, D, Ê) = A Ê^δ N^(α + γ ln Ê) + B Ê^ω D^(β + ζ ln Ê) + c

with ``N`` (active parameters) and ``D`` (training tokens) both in billions.
Fixing the architecture knobs gives the joint form; fixing Ê collapses it to a
five-coefficient Chinchilla surface (``reduce_chinchilla``).
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy import optimize

from .arch import BaseArch, MemoryBudget, MoeSpec, count_params, memory_proxy

log = logging.getLogger(__name__)

COEFF_NAMES = ("A", "delta", "alpha", "gamma", "B", "omega", "beta", "zeta", "c")
REDUCED_NAMES = ("A", "alpha", "B", "beta", "c")
EXPERT_GRID = (1, 2, 4, 8, 16, 32)
BILLION = 1e9
C_ANCHOR_STD = 0.13


class ScalingError(ValueError):
    pass


class InsufficientDataError(ScalingError):
    pass


class InfeasibleBudgetError(ScalingError):
    pass


@dataclass(frozen=True)
class ExpertTransform:
    """Saturating remap of the expert count, anchored so that Ê(e_start) = e_start."""

    e_start: float = 1.0
    e_max: float = 32.0

    def __post_init__(self):
        if not (1 <= self.e_start < self.e_max):
            raise ScalingError("need 1 <= e_start < e_max")

    def __call__(self, e):
        e = np.asarray(e, dtype=float)
        if np.any(e < 1):
            raise ScalingError("expert count must be >= 1")
        offset = 1.0 / (1.0 / self.e_start - 1.0 / self.e_max)
        out = 1.0 / (1.0 / (e - 1.0 + offset) + 1.0 / self.e_max)
        return float(out) if out.ndim == 0 else out


IDENTITY_TRANSFORM = ExpertTransform(1.0, 1e300)


@dataclass(frozen=True)
class ScalingCoeffs:
    A: float
    delta: float
    alpha: float
    gamma: float
    B: float
    omega: float
    beta: float
    zeta: float
    c: float
    metadata: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        vals = self.as_array()
        if not np.all(np.isfinite(vals)):
            raise ScalingError("coefficients must be finite")
        if self.c <= 0:
            raise ScalingError("irreducible loss c must be > 0")

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, k) for k in COEFF_NAMES], dtype=float)

    @classmethod
    def from_array(cls, arr: Sequence[float], metadata: dict | None = None) -> "ScalingCoeffs":
        return cls(*map(float, arr), metadata=dict(metadata or {}))

    @classmethod
    def from_reduced(cls, A, alpha, B, beta, c, metadata=None) -> "ScalingCoeffs":
        """Coefficients with the expert exponents absorbed (set to zero)."""
        md = dict(metadata or {})
        md.setdefault("absorbed", True)
        return cls(A, 0.0, alpha, 0.0, B, 0.0, beta, 0.0, c, metadata=md)

    @property
    def absorbed(self) -> bool:
        return self.delta == self.gamma == self.omega == self.zeta == 0.0

    @property
    def transform(self) -> ExpertTransform:
        t = self.metadata.get("transform", {})
        return ExpertTransform(t.get("e_start", 1.0), t.get("e_max", 32.0))

    def to_json(self) -> dict:
        out = {k: getattr(self, k) for k in COEFF_NAMES}
        md = {"units": "billions", "transform": {"e_start": 1.0, "e_max": 32.0}}
        md.update(self.metadata)
        out["metadata"] = md
        return out

    @classmethod
    def from_json(cls, obj: Mapping) -> "ScalingCoeffs":
        try:
            vals = [float(obj[k]) for k in COEFF_NAMES]
        except KeyError as exc:
            raise ScalingError(f"coefficient file missing field {exc}") from exc
        md = dict(obj.get("metadata", {}))
        units = md.get("units", "billions")
        if units != "billions":
            raise ScalingError(f"unsupported units {units!r}; expected 'billions'")
        return cls(*vals, metadata=md)


@dataclass(frozen=True)
class ChinchillaCoeffs:
    A: float
    alpha: float
    B: float
    beta: float
    c: float

    def predict(self, n_act, d):
        n_act = np.asarray(n_act, dtype=float)
        d = np.asarray(d, dtype=float)
        return self.A * n_act**self.alpha + self.B * d**self.beta + self.c


@dataclass(frozen=True)
class Observation:
    n_act: float  # billions of parameters
    d: float  # billions of tokens
    e: float
    loss: float

    def __post_init__(self):
        if min(self.n_act, self.d, self.e, self.loss) <= 0:
            raise ScalingError(f"observation fields must be positive: {self}")


@dataclass
class FitResult:
    coeffs: ScalingCoeffs
    rmse: float
    iterations: int
    stage: str
    converged: bool = True
    mode: str = "joint"

    def predict(self, n_act, d, e, transform: ExpertTransform | None = None):
        t = transform or self.coeffs.transform
        return predict_loss(self.coeffs, n_act, d, t(e))


def reduce_chinchilla(coeffs: ScalingCoeffs, e_hat: float) -> ChinchillaCoeffs:
    if e_hat < 1:
        raise ScalingError("Ê must be >= 1")
    le = math.log(e_hat)
    return ChinchillaCoeffs(
        A=coeffs.A * e_hat**coeffs.delta,
        alpha=coeffs.alpha + coeffs.gamma * le,
        B=coeffs.B * e_hat**coeffs.omega,
        beta=coeffs.beta + coeffs.zeta * le,
        c=coeffs.c,
    )


def predict_loss(coeffs: ScalingCoeffs, n_act, d, e_hat):
    """Predicted loss; ``n_act`` and ``d`` in billions, broadcasting over arrays."""
    n_act = np.asarray(n_act, dtype=float)
    d = np.asarray(d, dtype=float)
    if np.any(n_act <= 0) or np.any(d <= 0):
        raise ScalingError("n_act and d must be positive")
    e_hat = np.asarray(e_hat, dtype=float)
    if e_hat.ndim == 0:
        out = reduce_chinchilla(coeffs, float(e_hat)).predict(n_act, d)
    else:
        out = _surface(coeffs.as_array(), n_act, d, np.log(e_hat))
    return float(out) if np.ndim(out) == 0 else out


# -- fitting ------------------------------------------------------------------

def _surface(theta, n, d, le):
    A, dl, al, ga, B, om, be, ze, c = theta
    ln_n, ln_d = np.log(n), np.log(d)
    t1 = A * np.exp(dl * le + (al + ga * le) * ln_n)
    t2 = B * np.exp(om * le + (be + ze * le) * ln_d)
    return t1 + t2 + c


def _surface_jac(theta, n, d, le):
    A, dl, al, ga, B, om, be, ze, c = theta
    ln_n, ln_d = np.log(n), np.log(d)
    u1 = np.exp(dl * le + (al + ga * le) * ln_n)
    u2 = np.exp(om * le + (be + ze * le) * ln_d)
    t1, t2 = A * u1, B * u2
    return np.stack(
        [u1, t1 * le, t1 * ln_n, t1 * le * ln_n,
         u2, t2 * le, t2 * ln_d, t2 * le * ln_d,
         np.ones_like(n)],
        axis=1,
    )


_JOINT_IDX = np.arange(9)
_REDUCED_IDX = np.array([0, 2, 4, 6, 8])


class _Problem:
    """MSE objective restricted to the free coefficients of a fit mode."""

    def __init__(self, n, d, le, y, free, c_anchor=None, c_weight=0.0):
        self.n, self.d, self.le, self.y = n, d, le, y
        self.free = free
        self.c_anchor = c_anchor
        self.c_weight = c_weight

    def full(self, p):
        theta = np.zeros(9)
        theta[self.free] = p
        return theta

    def residuals(self, p):
        return _surface(self.full(p), self.n, self.d, self.le) - self.y

    def model(self, _x, *p):
        return _surface(self.full(np.asarray(p)), self.n, self.d, self.le)

    def model_jac(self, _x, *p):
        return _surface_jac(self.full(np.asarray(p)), self.n, self.d, self.le)[:, self.free]

    def objective(self, p):
        r = self.residuals(p)
        J = _surface_jac(self.full(p), self.n, self.d, self.le)[:, self.free]
        f = float(np.mean(r**2))
        g = 2.0 * J.T @ r / r.size
        if self.c_anchor is not None and self.c_weight:
            dc = p[-1] - self.c_anchor
            f += self.c_weight * dc**2
            g[-1] += 2.0 * self.c_weight * dc
        return f, g


def _bounds(k):
    lo = np.full(k, -5.0)
    hi = np.full(k, 5.0)
    lo[-1], hi[-1] = 1e-9, 10.0
    return lo, hi


def _loglog_slope(x, y):
    slope, intercept = np.polyfit(np.log(x), np.log(y), 1)
    return slope, math.exp(intercept)


def _warm_starts(n, d, e, y, joint):
    """Initial points from log-log regressions on marginal slices, for a few c guesses."""
    e_lo = e.min()
    base = e == e_lo
    d_hi = d[base].max()
    n_hi = n[base].max()
    sl_n = base & (d == d_hi)
    sl_d = base & (n == n_hi)
    lo, span = y.min(), max(float(np.ptp(y)), 1e-3)
    starts = []
    for frac in (0.5, 0.2, 1.0, 2.0):
        c0 = max(lo - frac * span, 1e-3)
        try:
            a_n, A0 = _loglog_slope(n[sl_n], np.maximum(y[sl_n] - c0, 1e-6))
            a_d, B0 = _loglog_slope(d[sl_d], np.maximum(y[sl_d] - c0, 1e-6))
        except (np.linalg.LinAlgError, ValueError, TypeError):
            a_n, A0, a_d, B0 = -0.3, span, -0.3, span
        A0, B0 = np.clip([A0 / 2, B0 / 2], 1e-3, 4.9)
        a_n, a_d = np.clip([a_n, a_d], -4.9, -1e-3)
        if joint:
            starts.append(np.array([A0, 0.0, a_n, 0.0, B0, 0.0, a_d, 0.0, c0]))
        else:
            starts.append(np.array([A0, a_n, B0, a_d, c0]))
    return starts


def _validate(obs: Sequence[Observation], mode: str) -> None:
    need = 40 if mode == "joint" else 12
    if len(obs) < need:
        raise InsufficientDataError(f"{mode} fit needs >= {need} observations, got {len(obs)}")
    n_vals = {o.n_act for o in obs}
    d_vals = {o.d for o in obs}
    if len(n_vals) < 2 or len(d_vals) < 2:
        raise InsufficientDataError("observations must span >= 2 values of n_act and of d")
    if mode == "joint" and len({o.e for o in obs}) < 2:
        raise InsufficientDataError("joint fit needs >= 2 distinct expert counts")


def fit(
    observations: Sequence[Observation],
    transform: ExpertTransform = ExpertTransform(),
    mode: str = "joint",
    c_anchor: float | None = None,
    c_anchor_std: float = C_ANCHOR_STD,
    max_iter: int = 10_000,
    tol: float = 1e-10,
) -> FitResult:
    """Two-stage fit: bounded nonlinear least squares warm start, then L-BFGS-B on the MSE.

    ``mode`` is ``"joint"`` (all nine coefficients, expert count varies) or
    ``"per-setting"`` (five Chinchilla composites; Ê is absorbed). In
    per-setting mode, ``c_anchor`` adds a quadratic penalty
    ``((c - c_anchor) / c_anchor_std)**2`` pulling the irreducible loss toward an
    external estimate.
    """
    if mode not in ("joint", "per-setting"):
        raise ScalingError(f"unknown fit mode {mode!r}")
    _validate(observations, mode)
    joint = mode == "joint"
    n = np.array([o.n_act for o in observations])
    d = np.array([o.d for o in observations])
    e = np.array([o.e for o in observations])
    y = np.array([o.loss for o in observations])
    le = np.log(transform(e)) if joint else np.zeros_like(n)
    free = _JOINT_IDX if joint else _REDUCED_IDX
    c_weight = 1.0 / c_anchor_std**2 if (c_anchor is not None and not joint) else 0.0
    prob = _Problem(n, d, le, y, free, c_anchor, c_weight)
    md = {
        "transform": {"e_start": transform.e_start, "e_max": transform.e_max},
        "units": "billions",
        "fit_mode": mode,
    }

    if np.ptp(y) == 0.0:
        # flat surface: the exact solution is a constant
        p = np.zeros(len(free))
        p[-1] = y[0]
        theta = prob.full(p)
        return FitResult(ScalingCoeffs.from_array(theta, md), 0.0, 0, "warm-start", True, mode)

    lo, hi = _bounds(len(free))
    best_p, best_f = None, np.inf
    for p0 in _warm_starts(n, d, e, y, joint):
        p0 = np.clip(p0, lo + 1e-12, hi - 1e-12)
        try:
            p, _ = optimize.curve_fit(
                prob.model, None, y, p0=p0, jac=prob.model_jac,
                bounds=(lo, hi), method="trf", maxfev=2000,
                ftol=1e-12, xtol=1e-12, gtol=1e-12,
            )
        except (RuntimeError, ValueError, optimize.OptimizeWarning) as exc:
            log.debug("warm start from %s failed: %s", p0, exc)
            p = p0
        f = prob.objective(p)[0]
        if f < best_f:
            best_p, best_f = p, f
    warm_p = best_p

    res = optimize.minimize(
        prob.objective, warm_p, jac=True, method="L-BFGS-B",
        bounds=list(zip(lo, hi)),
        options={"maxiter": max_iter, "ftol": tol, "gtol": 1e-14, "maxfun": 4 * max_iter},
    )
    stage = "refined"
    p = res.x
    if res.fun > best_f:
        p, stage = warm_p, "warm-start"
    converged = bool(res.success) or res.nit < max_iter
    if not converged:
        log.warning("L-BFGS-B hit the iteration cap; returning best-so-far coefficients")
    theta = prob.full(p)
    rmse = float(np.sqrt(np.mean(prob.residuals(p) ** 2)))
    if not joint:
        md["absorbed"] = True
    return FitResult(
        ScalingCoeffs.from_array(theta, md), rmse, int(res.nit), stage, converged, mode
    )


# -- architecture search ------------------------------------------------------

@dataclass(frozen=True)
class CandidateGrid:
    """Backbone family swept by the optimizer: d_ff = 4 d_model, d_model / n_l ≈ 40."""

    n_act_min: float = 0.05e9
    n_act_max: float = 2e9
    n_points: int = 64
    aspect: float = 40.0
    expansion: int = 4
    n_kv: int = 4
    d_h: int = 64
    vocab_size: int = 128_256
    round_to: int = 64
    experts: tuple[int, ...] = EXPERT_GRID

    def backbone(self, d_model: int) -> BaseArch:
        n_h = d_model // self.d_h
        return BaseArch(
            d_model=d_model,
            d_ff=self.expansion * d_model,
            n_h=n_h,
            n_kv=math.gcd(n_h, self.n_kv),
            d_h=self.d_h,
            n_l=max(1, round(d_model / self.aspect)),
            vocab_size=self.vocab_size,
        )

    def _dense_n_act(self, d_model: float) -> float:
        n_l = d_model / self.aspect
        kv = self.n_kv * self.d_h
        per_layer = 2 * d_model**2 + 2 * d_model * kv + 3 * d_model * self.expansion * d_model
        return self.vocab_size * d_model + n_l * per_layer + (2 * n_l + 1) * d_model

    def backbones(self) -> list[BaseArch]:
        targets = np.geomspace(self.n_act_min, self.n_act_max, self.n_points)
        seen: dict[int, BaseArch] = {}
        for t in targets:
            d = optimize.brentq(lambda x: self._dense_n_act(x) - t, 1.0, 1e6)
            d_model = max(self.round_to, int(round(d / self.round_to)) * self.round_to)
            if d_model not in seen:
                seen[d_model] = self.backbone(d_model)
        return [seen[k] for k in sorted(seen)]


@dataclass(frozen=True)
class FrontierPoint:
    e: int
    d_model: int
    n_l: int
    n_act: int
    n_total: int
    memory_gb: float
    d_tokens: float
    loss: float
    feasible: bool
    pareto: bool = False

    def row(self) -> dict:
        return {
            "e": self.e,
            "d_model": self.d_model,
            "n_l": self.n_l,
            "n_act_b": self.n_act / BILLION,
            "n_total_b": self.n_total / BILLION,
            "memory_gb": self.memory_gb,
            "d_b": self.d_tokens / BILLION,
            "loss": self.loss,
            "feasible": int(self.feasible),
            "pareto": int(self.pareto),
        }


@dataclass
class OptimizationResult:
    best: FrontierPoint
    best_backbone: BaseArch
    frontier: list[FrontierPoint]

    @property
    def best_e(self) -> int:
        return self.best.e

    def summary(self) -> dict:
        return {
            "best_e": self.best.e,
            "backbone": asdict(self.best_backbone),
            "n_act": self.best.n_act,
            "n_total": self.best.n_total,
            "d_tokens": self.best.d_tokens,
            "memory_gb": self.best.memory_gb,
            "predicted_loss": self.best.loss,
        }


def _mark_pareto(points: list[FrontierPoint]) -> list[FrontierPoint]:
    """Flag points not dominated in (memory, loss); this is the envelope formed
    by truncating each expert-count curve where the next one undercuts it."""
    order = sorted(range(len(points)), key=lambda i: (points[i].memory_gb, points[i].loss))
    out = list(points)
    best = math.inf
    for i in order:
        if points[i].loss < best:
            best = points[i].loss
            out[i] = replace(points[i], pareto=True)
    return out


def optimize_architecture(
    coeffs: ScalingCoeffs,
    transform: ExpertTransform,
    f_train: float,
    budget: MemoryBudget,
    candidates: CandidateGrid = CandidateGrid(),
) -> OptimizationResult:
    """Minimize predicted loss over (backbone, E) at fixed training FLOPs under a memory cap.

    Tokens follow from the compute constraint, ``D = f_train / (6 n_act)``.
    Ties go to the smaller E, then the smaller total parameter count.
    """
    if f_train <= 0:
        raise ScalingError("f_train must be positive")
    backbones = candidates.backbones()
    if not backbones or not candidates.experts:
        raise ScalingError("empty candidate grid")
    points: list[FrontierPoint] = []
    archs: dict[tuple[int, int], BaseArch] = {}
    for base in backbones:
        for e in candidates.experts:
            counts = count_params(base, MoeSpec(E=e, g=1, k=1))
            d_tok = f_train / (6.0 * counts.n_act)
            mem = memory_proxy(counts, base, budget)
            loss = predict_loss(coeffs, counts.n_act / BILLION, d_tok / BILLION, transform(e))
            points.append(FrontierPoint(
                e, base.d_model, base.n_l, counts.n_act, counts.n_total,
                mem.total_gb, d_tok, loss, mem.feasible,
            ))
            archs[(base.d_model, e)] = base
    feasible = [p for p in points if p.feasible]
    if not feasible:
        smallest = min(p.memory_gb for p in points)
        raise InfeasibleBudgetError(
            f"no candidate fits {budget.M} GB (smallest needs {smallest:.3f} GB)"
        )
    best = min(feasible, key=lambda p: (p.loss, p.e, p.n_total))
    return OptimizationResult(best, archs[(best.d_model, best.e)], _mark_pareto(points))


# -- compute-optimal frontier -------------------------------------------------

@dataclass(frozen=True)
class FrontierRow:
    setting: str
    flops: float
    n_act_b: float
    d_b: float
    loss: float


def compute_optimal(coeffs: ScalingCoeffs, e_hat: float, flops: float,
                    n_range: tuple[float, float] = (1e-4, 1e4)) -> FrontierRow:
    """Minimize loss along ``6 N D = flops`` (N, D in billions)."""
    red = reduce_chinchilla(coeffs, e_hat)
    budget = flops / (6.0 * BILLION * BILLION)

    def f(log_n):
        n = math.exp(log_n)
        return float(red.predict(n, budget / n))

    lo, hi = math.log(n_range[0]), math.log(n_range[1])
    grid = np.linspace(lo, hi, 401)
    vals = [f(x) for x in grid]
    i = int(np.argmin(vals))
    a, b = grid[max(i - 1, 0)], grid[min(i + 1, len(grid) - 1)]
    res = optimize.minimize_scalar(f, bounds=(a, b), method="bounded",
                                   options={"xatol": 1e-10})
    n = math.exp(res.x)
    return FrontierRow("", flops, n, budget / n, float(res.fun))


def frontier_sweep(
    settings: Mapping[str, tuple[ScalingCoeffs, float]],
    flops_list: Iterable[float],
) -> list[FrontierRow]:
    """Compute-optimal loss per (setting, FLOPs). ``settings`` maps name -> (coeffs, Ê)."""
    rows = []
    for flops in flops_list:
        for name, (coeffs, e_hat) in settings.items():
            r = compute_optimal(coeffs, e_hat, float(flops))
            rows.append(replace(r, setting=name))
    return rows


# -- file formats -------------------------------------------------------------

OBS_HEADER = ("n_act_b", "d_b", "e", "loss")
FRONTIER_HEADER = ("setting", "flops", "n_act_b", "d_b", "loss")


def read_observations(fh) -> list[Observation]:
    reader = csv.DictReader(fh)
    missing = set(OBS_HEADER) - set(reader.fieldnames or ())
    if missing:
        raise ScalingError(f"observations CSV missing columns {sorted(missing)}")
    return [
        Observation(float(r["n_act_b"]), float(r["d_b"]), float(r["e"]), float(r["loss"]))
        for r in reader
    ]


def write_observations(fh, observations: Iterable[Observation]) -> None:
    w = csv.writer(fh)
    w.writerow(OBS_HEADER)
    for o in observations:
        w.writerow([repr(o.n_act), repr(o.d), repr(o.e), repr(o.loss)])


def write_frontier(fh, rows: Iterable[FrontierRow]) -> None:
    w = csv.writer(fh)
    w.writerow(FRONTIER_HEADER)
    for r in rows:
        w.writerow([r.setting, repr(r.flops), repr(r.n_act_b), repr(r.d_b), repr(r.loss)])


def read_frontier(fh) -> list[FrontierRow]:
    return [
        FrontierRow(r["setting"], float(r["flops"]), float(r["n_act_b"]),
                    float(r["d_b"]), float(r["loss"]))
        for r in csv.DictReader(fh)
    ]


def load_coeffs(path: str | Path) -> ScalingCoeffs:
    with open(path) as fh:
        return ScalingCoeffs.from_json(json.load(fh))


def save_coeffs(path: str | Path, coeffs: ScalingCoeffs) -> None:
    with open(path, "w") as fh:
        json.dump(coeffs.to_json(), fh, indent=2)


# -- shipped fixtures ---------------------------------------------------------

FIXTURES = {
    "expert_sweep_joint": "expert_sweep_joint.json",
    **{f"granularity_g{g}": f"granularity_g{g}.json" for g in (1, 2, 4, 8, 16)},
    "shared_off": "shared_off.json",
    "shared_on": "shared_on.json",
}


def fixture_path(name: str):
    if name not in FIXTURES:
        raise ScalingError(f"unknown fixture {name!r}; choose from {sorted(FIXTURES)}")
    return resources.files("edgemoe") / "data" / "coeffs" / FIXTURES[name]


def load_fixture(name: str) -> ScalingCoeffs:
    return ScalingCoeffs.from_json(json.loads(fixture_path(name).read_text()))


def sweep_settings(axis: str, coeffs_dir: str | Path | None = None) -> dict[str, tuple[ScalingCoeffs, float]]:
    """Design settings compared along one axis, as ``{name: (coeffs, Ê)}``."""

    def get(name):
        if coeffs_dir is None:
            return load_fixture(name)
        path = Path(coeffs_dir) / FIXTURES[name]
        if not path.exists():
            raise FileNotFoundError(f"missing coefficient fixture {path}")
        return load_coeffs(path)

    if axis == "experts":
        joint = get("expert_sweep_joint")
        t = joint.transform
        return {f"E={e}": (joint, t(e)) for e in EXPERT_GRID}
    if axis == "granularity":
        return {f"g={g}": (get(f"granularity_g{g}"), 1.0) for g in (1, 2, 4, 8, 16)}
    if axis == "shared":
        return {"shared=off": (get("shared_off"), 1.0), "shared=on": (get("shared_on"), 1.0)}
    raise ScalingError(f"unknown sweep axis {axis!r}")


def synthetic_observations(
    coeffs: ScalingCoeffs,
    transform: ExpertTransform = ExpertTransform(),
    n_grid: Sequence[float] = (0.3, 0.5, 0.9),
    d_grid: Sequence[float] = tuple(range(100, 501, 50)),
    e_grid: Sequence[float] = EXPERT_GRID,
    noise: float = 0.0,
    rng: np.random.Generator | None = None,
) -> list[Observation]:
    """Loss observations generated from known coefficients, optionally with Gaussian noise."""
    rng = rng or np.random.default_rng(0)
    out = []
    for e in e_grid:
        for n in n_grid:
            for d in d_grid:
                y = predict_loss(coeffs, n, d, transform(e))
                if noise:
                    y += rng.normal(0.0, noise)
                out.append(Observation(float(n), float(d), float(e), float(y)))
    return out


def frontier_to_csv(rows: Iterable[FrontierRow]) -> str:
    buf = io.StringIO()
    write_frontier(buf, rows)
    return buf.getvalue()
