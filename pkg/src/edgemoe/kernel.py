"""Fused MoE inference: counting-sort dispatch, grouped INT4 GEMMs, SwiGLU and weighted unpermute.

The fused path runs one routing call per layer, sorts (token, slot) pairs by
expert, quantizes each token's activations to INT8 exactly once, and walks
the contiguous per-expert slices in ascending expert order. Within a slice the
accumulation order is fixed, so outputs are bit-reproducible.
"""

from __future__ import annotations

import csv
import io
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .arch import DispatchMode
from .model.layers import sigmoid
from .model.moe import LayerExperts, MoeOutput, dense_routing, moe_naive_loop
from .model.router import DispatchPlan, RouterOutput, RouterState, router_forward
from .model.transformer import KVCache, ModelWeights, transformer_forward
from .quant import (
    QuantizedTensor,
    dequantize,
    dequantize_activations,
    fake_quant_activations,
    pack_nibbles,
    quantize_activations_int8,
)
from .text import fit_length, read_prompts

OPS = ("route", "sort", "quantize", "gate_up", "swiglu", "down", "scatter", "shared")


class KernelError(ValueError):
    pass


# -- sort -----------------------------------------------------------------------

@dataclass
class SortResult:
    permutation: np.ndarray  # slot ids grouped by expert
    inverse: np.ndarray  # inverse[slot] = position of slot in the sorted order
    offsets: np.ndarray  # (n_experts + 1,)
    counts: np.ndarray  # (n_experts,)


def counting_sort_by_expert(assignments, n_experts: int) -> SortResult:
    """Stable grouping of slots by expert id in O(slots + experts).

    numpy's stable sort on 16-bit integer keys is a radix (counting) sort, so
    narrowing the key type gives the linear-time pass directly.
    """
    a = np.asarray(assignments, dtype=np.int64).reshape(-1)
    if n_experts < 1:
        raise KernelError("need at least one expert")
    if a.size and (a.min() < 0 or a.max() >= n_experts):
        raise KernelError("expert id out of range")
    keys = a.astype(np.uint16) if n_experts <= 1 << 16 else a
    perm = np.argsort(keys, kind="stable").astype(np.int64)
    counts = np.bincount(a, minlength=n_experts).astype(np.int64)
    offsets = np.zeros(n_experts + 1, dtype=np.int64)
    np.cumsum(counts, out=offsets[1:])
    inverse = np.empty_like(perm)
    inverse[perm] = np.arange(perm.size)
    return SortResult(perm, inverse, offsets, counts)


# -- grouped GEMM -----------------------------------------------------------------

def _int_matmul(codes, scales, q: QuantizedTensor) -> np.ndarray:
    """INT8 activations times INT4 weights with per-group and per-row scale folding.

    Integer products are accumulated in float64, which is exact for these code
    ranges, so this equals an int32 dot product per group.
    """
    wc = q.row_codes().astype(np.float64)
    ws = q.scales.astype(np.float64)
    xc = codes.astype(np.float64)
    gs = q.group_size
    out = np.zeros((xc.shape[0], wc.shape[0]))
    for g in range(ws.shape[1]):
        sl = slice(g * gs, (g + 1) * gs)
        out += (xc[:, sl] @ wc[:, sl].T) * ws[:, g]
    return out * scales[:, None]


def grouped_gemm(x, weights, offsets, x_scales=None) -> np.ndarray:
    """Multiply each expert's contiguous row slice by that expert's ``(out, in)`` weight.

    ``weights`` entries are float arrays or QuantizedTensor. With ``x_scales``,
    ``x`` holds INT8 codes and quantized weights use the integer path; float
    weights then see the dequantized activations. Empty slices are skipped.
    """
    offsets = np.asarray(offsets)
    if len(offsets) != len(weights) + 1 or offsets[-1] != x.shape[0]:
        raise KernelError("offsets do not match the activation rows or expert count")
    out_dim = {w.shape[0] for w in weights}
    in_dim = {w.shape[-1] for w in weights}
    if len(out_dim) != 1 or in_dim != {x.shape[1]}:
        raise KernelError("expert weight shapes are inconsistent with the activations")
    out = np.zeros((x.shape[0], out_dim.pop()))
    for e, w in enumerate(weights):
        s, t = offsets[e], offsets[e + 1]
        if s == t:
            continue
        if x_scales is not None and isinstance(w, QuantizedTensor):
            out[s:t] = _int_matmul(x[s:t], np.asarray(x_scales)[s:t], w)
            continue
        xs = x[s:t] if x_scales is None else dequantize_activations(x[s:t], np.asarray(x_scales)[s:t])
        wf = dequantize(w) if isinstance(w, QuantizedTensor) else w
        out[s:t] = xs @ wf.T
    return out


# -- expert banks -----------------------------------------------------------------

def _rows(q: QuantizedTensor, start: int, stop: int) -> tuple[np.ndarray, np.ndarray]:
    return q.row_codes()[start:stop], q.scales[start:stop]


def _stack_rows(parts, n_cols: int, group_size: int) -> QuantizedTensor:
    codes = np.concatenate([c for c, _ in parts])
    scales = np.concatenate([s for _, s in parts])
    return QuantizedTensor(pack_nibbles(codes), scales, (codes.shape[0], n_cols), group_size)


def split_quantized_experts(q: QuantizedTensor) -> list[QuantizedTensor]:
    """Per-expert views of a stacked ``(R, out, in)`` quantized tensor."""
    R, o, i = q.shape
    return [_stack_rows([_rows(q, e * o, (e + 1) * o)], i, q.group_size) for e in range(R)]


def concat_gate_up(gate: QuantizedTensor, up: QuantizedTensor) -> QuantizedTensor:
    """Gate rows followed by up rows so both projections run as one GEMM."""
    n_cols = gate.shape[-1]
    return _stack_rows([_rows(gate, 0, gate.shape[0]), _rows(up, 0, up.shape[0])], n_cols,
                       gate.group_size)


@dataclass
class ExpertBank:
    gate_up: list  # per expert (2f, d)
    down: list  # per expert (d, f)
    shared_gate_up: object = None
    shared_down: object = None

    @property
    def n_experts(self) -> int:
        return len(self.gate_up)

    @property
    def quantized(self) -> bool:
        return isinstance(self.gate_up[0], QuantizedTensor)


def bank_from_experts(ex: LayerExperts) -> ExpertBank:
    gu = [np.concatenate([ex.w_gate[e], ex.w_up[e]], axis=0) for e in range(ex.n_experts)]
    down = [ex.w_down[e] for e in range(ex.n_experts)]
    sg = sd = None
    if ex.shared is not None:
        sg = np.concatenate([ex.shared[0], ex.shared[1]], axis=0)
        sd = ex.shared[2]
    return ExpertBank(gu, down, sg, sd)


def bank_for_layer(model: ModelWeights, l: int) -> ExpertBank:
    """Quantized bank when the model carries INT4 expert weights, float otherwise."""
    n = model.names(l)
    q = model.quantized
    if n["w_gate"] not in q:
        return bank_from_experts(model.experts(l))
    gates = split_quantized_experts(q[n["w_gate"]])
    ups = split_quantized_experts(q[n["w_up"]])
    downs = split_quantized_experts(q[n["w_down"]])
    bank = ExpertBank([concat_gate_up(g, u) for g, u in zip(gates, ups)], downs)
    if model.moe.shared:
        bank.shared_gate_up = concat_gate_up(q[n["s_gate"]], q[n["s_up"]])
        bank.shared_down = q[n["s_down"]]
    return bank


# -- fused forward ------------------------------------------------------------------

@dataclass
class KernelStats:
    calls: int = 0
    tokens: int = 0
    act_quant_calls: int = 0
    act_quant_rows: int = 0
    op_time: dict = field(default_factory=lambda: dict.fromkeys(OPS, 0.0))

    def reset(self) -> None:
        self.__init__()

    def shares(self) -> dict[str, float]:
        total = sum(self.op_time.values())
        return {k: (v / total if total > 0 else 0.0) for k, v in self.op_time.items()}


@dataclass
class FusedResult:
    y: np.ndarray
    router: RouterOutput
    sort: SortResult


def fused_moe_forward(x, router: RouterState | None, bank: ExpertBank, topk: int,
                      quantize_activations: bool | None = None,
                      stats: KernelStats | None = None) -> FusedResult:
    """Route, sort, quantize once, grouped gate+up GEMM, SwiGLU, grouped down GEMM, unpermute.

    ``quantize_activations`` defaults to on for quantized banks and off otherwise.
    The down projection consumes the float SwiGLU output.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise KernelError("expected (tokens, d_model) activations")
    stats = stats if stats is not None else KernelStats()
    quant = bank.quantized if quantize_activations is None else quantize_activations
    N = x.shape[0]
    t0 = time.perf_counter()
    rout = dense_routing(N) if router is None else router_forward(x, router, topk)
    t1 = time.perf_counter()
    sort = counting_sort_by_expert(rout.selected, bank.n_experts)
    tok = sort.permutation // rout.selected.shape[1]
    t2 = time.perf_counter()
    if quant:
        codes, scales = quantize_activations_int8(x)
        stats.act_quant_calls += 1
        stats.act_quant_rows += N
        xin, xs = codes, scales
    else:
        xin, xs = x, None
    t3 = time.perf_counter()
    gu = grouped_gemm(xin[tok], bank.gate_up, sort.offsets, None if xs is None else xs[tok])
    t4 = time.perf_counter()
    f = gu.shape[1] // 2
    a = gu[:, :f]
    act = a * sigmoid(a) * gu[:, f:]
    t5 = time.perf_counter()
    down = grouped_gemm(act, bank.down, sort.offsets)
    t6 = time.perf_counter()
    y = np.zeros(x.shape)
    w = rout.weights.reshape(-1)[sort.permutation]
    np.add.at(y, tok, w[:, None] * down)
    t7 = time.perf_counter()
    if bank.shared_gate_up is not None:
        one = np.array([0, N])
        sgu = grouped_gemm(xin, [bank.shared_gate_up], one, xs)
        fs = sgu.shape[1] // 2
        sa = sgu[:, :fs]
        y += grouped_gemm(sa * sigmoid(sa) * sgu[:, fs:], [bank.shared_down], one)
    t8 = time.perf_counter()
    for k, dt in zip(OPS, np.diff([t0, t1, t2, t3, t4, t5, t6, t7, t8])):
        stats.op_time[k] += dt
    stats.calls += 1
    stats.tokens += N
    return FusedResult(y, rout, sort)


def _plan_from_sort(sort: SortResult, topk: int, n_tokens: int) -> DispatchPlan:
    cap = int(sort.counts.max()) if sort.counts.size else 0
    return DispatchPlan(sort.permutation, sort.offsets, np.zeros((n_tokens, topk), bool), cap,
                        topk, DispatchMode.DROPLESS)


class FusedMoe:
    """Drop-in MoE block for ``transformer_forward(moe_fn=...)`` backed by the fused kernel."""

    def __init__(self, model: ModelWeights, quantize_activations: bool | None = None):
        self.banks = [bank_for_layer(model, l) for l in range(model.base.n_l)]
        self.quantize_activations = quantize_activations
        self.stats = KernelStats()

    def __call__(self, model: ModelWeights, l: int, x) -> MoeOutput:
        r = fused_moe_forward(x, model.router_state(l), self.banks[l], model.topk,
                              self.quantize_activations, self.stats)
        return MoeOutput(r.y, r.router, _plan_from_sort(r.sort, model.topk, x.shape[0]),
                         r.sort.counts)


def dequantized_experts(bank: ExpertBank) -> LayerExperts:
    """Float ``LayerExperts`` holding exactly the weights the bank computes with."""
    def f(w):
        return dequantize(w) if isinstance(w, QuantizedTensor) else np.asarray(w, np.float64)

    gu = [f(w) for w in bank.gate_up]
    half = gu[0].shape[0] // 2
    shared = None
    if bank.shared_gate_up is not None:
        sgu = f(bank.shared_gate_up)
        hs = sgu.shape[0] // 2
        shared = (sgu[:hs], sgu[hs:], f(bank.shared_down))
    return LayerExperts(np.stack([g[:half] for g in gu]), np.stack([g[half:] for g in gu]),
                        np.stack([f(w) for w in bank.down]), shared)


def naive_moe_forward(x, router: RouterState | None, bank: ExpertBank, topk: int,
                      quantize_activations: bool | None = None) -> np.ndarray:
    """Token-by-token reference for the fused path (same routing and activation rounding)."""
    x = np.asarray(x, dtype=np.float64)
    quant = bank.quantized if quantize_activations is None else quantize_activations
    rout = dense_routing(x.shape[0]) if router is None else router_forward(x, router, topk)
    xe = fake_quant_activations(x) if quant else None
    return moe_naive_loop(x, dequantized_experts(bank), rout, expert_input=xe)


class NaiveMoe:
    """Per-token loop MoE block, used as the baseline in benchmarks."""

    def __init__(self, model: ModelWeights, quantize_activations: bool | None = None):
        self.banks = [bank_for_layer(model, l) for l in range(model.base.n_l)]
        self.experts = [dequantized_experts(b) for b in self.banks]
        self.quantize_activations = quantize_activations

    def __call__(self, model: ModelWeights, l: int, x) -> MoeOutput:
        bank = self.banks[l]
        quant = bank.quantized if self.quantize_activations is None else self.quantize_activations
        router = model.router_state(l)
        rout = dense_routing(x.shape[0]) if router is None else router_forward(x, router, model.topk)
        xe = fake_quant_activations(x) if quant else None
        y = moe_naive_loop(x, self.experts[l], rout, expert_input=xe)
        sort = counting_sort_by_expert(rout.selected, bank.n_experts)
        return MoeOutput(y, rout, _plan_from_sort(sort, model.topk, x.shape[0]), sort.counts)


def relative_deviation(a, b) -> float:
    """``max|a - b| / max(max|b|, tiny)``."""
    a, b = np.asarray(a), np.asarray(b)
    scale = max(float(np.max(np.abs(b))) if b.size else 0.0, 1e-30)
    return float(np.max(np.abs(a - b))) / scale if a.size else 0.0


# -- benchmark ------------------------------------------------------------------------

@dataclass
class BenchReport:
    phase: str  # "prefill" or "decode"
    domain: str
    input_len: int
    output_len: int
    tokens: int
    wall_time: float  # mean seconds over timed runs
    throughput: float  # tokens / wall_time
    runs: list[float]  # per-run seconds
    per_op: dict[str, float]  # time shares inside the MoE kernel plus the rest of the model
    utilization: dict
    speedup_vs_naive: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def _timed_generation(model, prompt, output_len, moe_fn):
    cache = KVCache(model.base.n_l)
    t0 = time.perf_counter()
    fr = transformer_forward(np.asarray(prompt), model, cache, moe_fn)
    nxt = int(np.argmax(fr.logits[-1]))
    ttft = time.perf_counter() - t0
    loads = fr.loads.astype(np.int64)
    t1 = time.perf_counter()
    for _ in range(output_len):
        fr = transformer_forward(np.array([nxt]), model, cache, moe_fn)
        nxt = int(np.argmax(fr.logits[-1]))
        loads = loads + fr.loads
    return ttft, time.perf_counter() - t1, loads


def _utilization_summary(loads: np.ndarray) -> dict:
    return {
        "distinct_experts": int(np.count_nonzero(loads)),
        "argmax_expert": [int(i) for i in np.argmax(loads, axis=1)],
        "counts": loads.tolist(),
    }


def _op_shares(stats: KernelStats, total_wall: float) -> dict[str, float]:
    shares = {k: v / total_wall for k, v in stats.op_time.items()} if total_wall > 0 else {}
    shares["other"] = max(0.0, 1.0 - sum(shares.values())) if total_wall > 0 else 0.0
    return shares


def bench(model, prompts: dict, input_lens, output_lens, repeats: int = 3,
          warmup: int = 1) -> list[BenchReport]:
    """Prefill and decode timings per prompt domain with the fused kernel.

    ``model`` is a ModelWeights or a container path; ``prompts`` maps a domain
    name to a prompt file or a token list. Each domain's lines are joined into
    one stream and cycled or cut to each input length. Warm-up runs are
    excluded from the means; every timed run is kept in ``runs``.
    """
    if repeats < 1:
        raise KernelError("repeats must be at least 1")
    if not isinstance(model, ModelWeights):
        from .container import load_model

        model = load_model(model)
    V = model.base.vocab_size
    streams = {}
    for domain, src in prompts.items():
        if isinstance(src, (str, Path)):
            ids = [t for line in read_prompts(src, V) for t in line]
        else:
            ids = [int(t) % V for t in src]
        if not ids:
            raise KernelError(f"prompt domain {domain!r} is empty")
        streams[domain] = ids
    fused, naive = FusedMoe(model), NaiveMoe(model)
    reports = []
    for domain, ids in streams.items():
        for n_in in input_lens:
            prompt = fit_length(ids, int(n_in))
            speedup = _speedup(model, prompt, fused, naive)
            for n_out in output_lens:
                for _ in range(warmup):
                    _timed_generation(model, prompt, int(n_out), fused)
                fused.stats.reset()
                ttfts, decs, loads = [], [], None
                for _ in range(repeats):
                    ttft, dec, ld = _timed_generation(model, prompt, int(n_out), fused)
                    ttfts.append(ttft)
                    decs.append(dec)
                    loads = ld
                shares = _op_shares(fused.stats, sum(ttfts) + sum(decs))
                util = _utilization_summary(loads)
                t_pre = float(np.mean(ttfts))
                reports.append(BenchReport("prefill", domain, int(n_in), int(n_out), int(n_in),
                                           t_pre, int(n_in) / t_pre, ttfts, shares, util, speedup))
                if n_out > 0:
                    t_dec = float(np.mean(decs))
                    reports.append(BenchReport("decode", domain, int(n_in), int(n_out), int(n_out),
                                               t_dec, int(n_out) / t_dec, decs, shares, util,
                                               speedup))
    return reports


def _speedup(model, prompt, fused, naive, trials: int = 2) -> float:
    def best(fn):
        times = []
        for _ in range(trials):
            t = time.perf_counter()
            transformer_forward(np.asarray(prompt), model, moe_fn=fn)
            times.append(time.perf_counter() - t)
        return min(times)

    return best(naive) / best(fused)


BENCH_CSV_HEADER = ("phase", "domain", "input_len", "output_len", "run", "ttft_s", "decode_tps")


def reports_to_csv(reports: list[BenchReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(BENCH_CSV_HEADER)
    for r in reports:
        for i, t in enumerate(r.runs):
            if r.phase == "prefill":
                w.writerow([r.phase, r.domain, r.input_len, r.output_len, i, repr(t), ""])
            else:
                w.writerow([r.phase, r.domain, r.input_len, r.output_len, i, "",
                            repr(r.tokens / t if t > 0 else 0.0)])
    return buf.getvalue()


def reports_to_json(reports: list[BenchReport]) -> str:
    return json.dumps([r.to_dict() for r in reports], indent=2)


def reports_from_json(text: str) -> list[BenchReport]:
    return [BenchReport(**d) for d in json.loads(text)]
