"""``edgemoe`` command line: one subcommand per capability, file in, file (or stdout) out.

Exit codes: 0 success, 1 domain error (bad config, infeasible budget, ...),
2 I/O or file-format error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import sys
from dataclasses import asdict
from importlib import resources
from pathlib import Path

import numpy as np

from . import arch, container, kernel, scaling, text
from .model import AdamState, TrainHyper, generate, init_model, train_step
from .model.router import RoutingError
from .model.train import TrainingError
from .model.transformer import ModelError
from .model.utilization import expert_utilization
from .quant import QuantError, footprint_report

DOMAIN_ERRORS = (arch.ArchError, scaling.ScalingError, QuantError, RoutingError, ModelError,
                 TrainingError, kernel.KernelError, KeyError, ValueError)


# -- helpers ----------------------------------------------------------------------

def _emit(args, payload: str | bytes) -> None:
    out = getattr(args, "output", None)
    if out in (None, "-"):
        if isinstance(payload, bytes):
            sys.stdout.buffer.write(payload)
            sys.stdout.buffer.flush()
        else:
            sys.stdout.write(payload)
            if not payload.endswith("\n"):
                sys.stdout.write("\n")
        return
    path = Path(out)
    if isinstance(payload, bytes):
        path.write_bytes(payload)
    else:
        path.write_text(payload if payload.endswith("\n") else payload + "\n")


def _json(obj) -> str:
    return json.dumps(obj, indent=2)


def _arch_from_args(args) -> tuple[arch.BaseArch, arch.MoeSpec]:
    if args.config and args.preset:
        raise arch.ArchError("give either --config or --preset, not both")
    if args.config:
        return arch.load_arch(_existing(args.config))
    if args.preset:
        return arch.PRESETS[args.preset.upper()], arch.DEPLOYED_MOE
    raise arch.ArchError("an architecture is required: --config FILE or --preset S|M|L")


def _existing(path) -> Path:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"no such file: {p}")
    return p


def _float_list(s: str) -> list[float]:
    return [float(v) for v in s.replace(",", " ").split()] if s.strip() else []


def _int_list(s: str) -> list[int]:
    return [int(v) for v in s.replace(",", " ").split()] if s.strip() else []


def _budget(args) -> arch.MemoryBudget:
    return arch.MemoryBudget(b_w=args.bw, b_kv=args.bkv, T=args.context, M=args.memory_gb)


def _coeffs(path) -> scaling.ScalingCoeffs:
    if path is None:
        return scaling.load_fixture("expert_sweep_joint")
    return scaling.load_coeffs(_existing(path))


def _load_model(path):
    return container.load_model(_existing(path))


def default_prompt_files() -> dict[str, Path]:
    root = resources.files("edgemoe") / "data" / "prompts"
    return {name: Path(str(root / f"{name}.txt")) for name in ("knowledge", "code", "math")}


# -- subcommands --------------------------------------------------------------------

def cmd_params(args):
    base, moe = _arch_from_args(args)
    counts = arch.count_params(base, moe)
    _emit(args, _json(counts.to_dict()))


def cmd_flops(args):
    base, moe = _arch_from_args(args)
    counts = arch.count_params(base, moe)
    out = {"n_act": counts.n_act, "inference_flops_per_token": arch.inference_flops(counts)}
    if args.tokens is not None:
        out["d_tokens"] = args.tokens
        out["training_flops"] = arch.training_flops(counts, args.tokens)
    _emit(args, _json(out))


def cmd_memory(args):
    base, moe = _arch_from_args(args)
    counts = arch.count_params(base, moe)
    rep = arch.memory_proxy(counts, base, _budget(args))
    out = {**asdict(rep), "feasible": rep.feasible, "n_total": counts.n_total,
           "int4_footprint": footprint_report(counts.n_total)}
    _emit(args, _json(out))


def cmd_fit(args):
    with open(_existing(args.observations)) as fh:
        obs = scaling.read_observations(fh)
    t = scaling.ExpertTransform(args.e_start, args.e_max)
    res = scaling.fit(obs, t, mode=args.mode, c_anchor=args.c_anchor)
    payload = res.coeffs.to_json()
    payload["fit"] = {"rmse": res.rmse, "iterations": res.iterations, "stage": res.stage,
                      "converged": res.converged, "n_observations": len(obs)}
    if not res.converged:
        print("warning: fit did not converge; best-so-far coefficients written", file=sys.stderr)
    _emit(args, _json(payload))


def cmd_predict(args):
    coeffs = _coeffs(args.coeffs)
    t = coeffs.transform
    if args.grid:
        with open(_existing(args.grid)) as fh:
            rows = list(csv.DictReader(fh))
        try:
            pts = [(float(r["n_act_b"]), float(r["d_b"]), float(r["e"])) for r in rows]
        except KeyError as exc:
            raise scaling.ScalingError(f"grid CSV missing column {exc}") from exc
        truth = [float(r["loss"]) for r in rows] if rows and "loss" in rows[0] else None
    else:
        if args.n_act is None or args.d is None:
            raise scaling.ScalingError("give --grid FILE or both --n-act and --d")
        pts = [(args.n_act, args.d, float(e)) for e in (args.e or [1.0])]
        truth = None
    preds = [scaling.Observation(n, d, e, float(scaling.predict_loss(coeffs, n, d, t(e))))
             for n, d, e in pts]
    buf = io.StringIO()
    scaling.write_observations(buf, preds)
    if truth is not None and preds:
        rmse = math.sqrt(np.mean([(p.loss - y) ** 2 for p, y in zip(preds, truth)]))
        print(f"rmse vs input losses: {rmse:.3e}", file=sys.stderr)
    _emit(args, buf.getvalue())


def cmd_optimize(args):
    coeffs = _coeffs(args.coeffs)
    grid = scaling.CandidateGrid(n_act_min=args.n_act_min * 1e9, n_act_max=args.n_act_max * 1e9,
                                 n_points=args.n_points,
                                 experts=tuple(_int_list(args.experts)))
    res = scaling.optimize_architecture(coeffs, coeffs.transform, args.flops, _budget(args), grid)
    if args.frontier_csv:
        with open(args.frontier_csv, "w", newline="") as fh:
            rows = [p.row() for p in res.frontier]
            w = csv.DictWriter(fh, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)
    _emit(args, _json(res.summary()))


def cmd_sweep(args):
    settings = scaling.sweep_settings(args.axis, args.coeffs_dir)
    rows = scaling.frontier_sweep(settings, _float_list(args.flops))
    _emit(args, scaling.frontier_to_csv(rows))


def cmd_init_model(args):
    base, moe = _arch_from_args(args)
    model = init_model(base, moe, seed=args.seed, std=args.init_std)
    _emit(args, container.model_bytes(model)[0])


def _training_sequence(args, vocab: int) -> np.ndarray:
    if args.prompt_file:
        ids = [t for line in text.read_prompts(_existing(args.prompt_file), vocab) for t in line]
        return np.array(text.fit_length(ids, args.seq_len + 1))
    rng = np.random.default_rng(args.seed)
    return rng.integers(0, vocab, args.seq_len + 1)


def cmd_train_toy(args):
    model = _load_model(args.model)
    seq = _training_sequence(args, model.base.vocab_size)
    hp = TrainHyper(lr=args.lr, qat=args.qat)
    state = AdamState()
    for step in range(args.steps):
        r = train_step(model, seq[:-1], seq[1:], state, hp)
        if args.log_every and (step + 1) % args.log_every == 0:
            print(f"step {step + 1} loss {r.loss:.5f} ce {r.cross_entropy:.5f} "
                  f"grad_norm {r.grad_norm:.3f}", file=sys.stderr)
    quantize = bool(model.quantized) or args.qat
    if quantize:
        model.quantized = {}
    _emit(args, container.model_bytes(model, quantize=quantize)[0])


def cmd_generate(args):
    model = _load_model(args.model)
    if args.prompt_file:
        ids = [t for line in text.read_prompts(_existing(args.prompt_file), model.base.vocab_size)
               for t in line]
    else:
        ids = text.encode(args.prompt, model.base.vocab_size)
    moe_fn = kernel.FusedMoe(model) if args.fused else None
    out = generate(model, ids, args.max_new, args.temperature,
                   np.random.default_rng(args.seed), moe_fn)
    _emit(args, text.decode(out))


def cmd_quantize(args):
    model = _load_model(args.model)
    _emit(args, container.model_bytes(model, quantize=True)[0])


def _prompt_map(specs) -> dict[str, Path]:
    if not specs:
        return default_prompt_files()
    out = {}
    for s in specs:
        domain, sep, path = s.partition("=")
        if not sep:
            path, domain = s, Path(s).stem
        out[domain] = _existing(path)
    return out


def cmd_bench(args):
    model = _load_model(args.model)
    reports = kernel.bench(model, _prompt_map(args.prompts), _int_list(args.input_lens),
                           _int_list(args.output_lens), repeats=args.repeats, warmup=args.warmup)
    if args.csv:
        Path(args.csv).write_text(kernel.reports_to_csv(reports))
    _emit(args, kernel.reports_to_json(reports))


def cmd_utilization(args):
    model = _load_model(args.model)
    seqs = []
    for path in _prompt_map(args.prompts).values():
        seqs.extend(s for s in text.read_prompts(path, model.base.vocab_size) if s)
    util = expert_utilization(model, seqs)
    _emit(args, util.to_csv())


# -- parser -----------------------------------------------------------------------------

def _add_arch(p):
    p.add_argument("--config", help="architecture JSON file")
    p.add_argument("--preset", choices=["S", "M", "L", "s", "m", "l"],
                   help="published backbone with the deployed MoE design")


def _add_budget(p):
    p.add_argument("--bw", type=int, default=4, help="weight bits")
    p.add_argument("--bkv", type=int, default=8, help="KV-cache bits")
    p.add_argument("--context", type=int, default=8192, help="context length T")
    p.add_argument("--memory-gb", type=float, default=5.0, help="memory budget M in GB")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="edgemoe", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        p = sub.add_parser(name, help=help_, description=help_)
        p.add_argument("--output", "-o", help="output file (default: standard output)")
        p.add_argument("--seed", type=int, default=0, help="random seed")
        p.set_defaults(func=fn)
        return p

    p = add("params", cmd_params, "active and total parameter counts")
    _add_arch(p)
    p = add("flops", cmd_flops, "inference FLOPs per token and training FLOPs")
    _add_arch(p)
    p.add_argument("--tokens", type=float, help="training tokens D")
    p = add("memory", cmd_memory, "weights + KV-cache memory proxy")
    _add_arch(p)
    _add_budget(p)

    p = add("fit", cmd_fit, "fit scaling-law coefficients to loss observations")
    p.add_argument("--observations", required=True, help="CSV n_act_b,d_b,e,loss")
    p.add_argument("--mode", choices=["joint", "per-setting"], default="joint")
    p.add_argument("--c-anchor", type=float, help="irreducible-loss prior (per-setting mode)")
    p.add_argument("--e-start", type=float, default=1.0)
    p.add_argument("--e-max", type=float, default=32.0)

    p = add("predict", cmd_predict, "predicted loss on a grid or a single point")
    p.add_argument("--coeffs", help="coefficient JSON (default: shipped joint fit)")
    p.add_argument("--grid", help="CSV with n_act_b,d_b,e columns (loss optional)")
    p.add_argument("--n-act", type=float, help="active parameters, billions")
    p.add_argument("--d", type=float, help="training tokens, billions")
    p.add_argument("--e", type=float, nargs="*", help="expert counts")

    p = add("optimize", cmd_optimize, "best MoE design under a compute and memory budget")
    p.add_argument("--coeffs", help="coefficient JSON (default: shipped joint fit)")
    p.add_argument("--flops", type=float, default=5e20, help="training FLOPs")
    _add_budget(p)
    p.add_argument("--n-act-min", type=float, default=0.05, help="billions")
    p.add_argument("--n-act-max", type=float, default=2.0, help="billions")
    p.add_argument("--n-points", type=int, default=64)
    p.add_argument("--experts", default="1,2,4,8,16,32")
    p.add_argument("--frontier-csv", help="write the full candidate table here")

    p = add("sweep", cmd_sweep, "compute-optimal loss per design setting and FLOPs budget")
    p.add_argument("--axis", choices=["experts", "granularity", "shared"], required=True)
    p.add_argument("--flops", default="1e19,1e20,5e20,1e21,1e22",
                   help="comma-separated FLOPs budgets (empty for header only)")
    p.add_argument("--coeffs-dir", help="directory with coefficient fixtures")

    p = add("init-model", cmd_init_model, "randomly initialized toy model container")
    _add_arch(p)
    p.add_argument("--init-std", type=float, default=0.02)

    p = add("train-toy", cmd_train_toy, "memorize a short sequence with the toy trainer")
    p.add_argument("--model", required=True)
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--lr", type=float, default=3e-3)
    p.add_argument("--seq-len", type=int, default=64)
    p.add_argument("--prompt-file", help="train on this text instead of random tokens")
    p.add_argument("--qat", action="store_true", help="fake-quantize weights (INT4) while training")
    p.add_argument("--log-every", type=int, default=0)

    p = add("generate", cmd_generate, "continue a prompt with the toy model")
    p.add_argument("--model", required=True)
    p.add_argument("--prompt", default="0")
    p.add_argument("--prompt-file")
    p.add_argument("--max-new", type=int, default=16)
    p.add_argument("--temperature", type=float, default=0.0)
    p.add_argument("--fused", action="store_true", help="use the fused MoE kernel")

    p = add("quantize", cmd_quantize, "INT4 group-wise quantization of a model container")
    p.add_argument("--model", required=True)

    p = add("bench", cmd_bench, "prefill/decode timing of the fused kernel per prompt domain")
    p.add_argument("--model", required=True)
    p.add_argument("--prompts", nargs="*", help="DOMAIN=FILE entries (default: shipped prompts)")
    p.add_argument("--input-lens", default="32,128")
    p.add_argument("--output-lens", default="16")
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--warmup", type=int, default=1)
    p.add_argument("--csv", help="also write the per-run CSV here")

    p = add("utilization", cmd_utilization, "per-layer expert utilization over prompt files")
    p.add_argument("--model", required=True)
    p.add_argument("--prompts", nargs="*", help="DOMAIN=FILE entries (default: shipped prompts)")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.func(args)
    except (OSError, container.ContainerError) as exc:
        print(f"edgemoe {args.command}: I/O error: {exc}", file=sys.stderr)
        return 2
    except DOMAIN_ERRORS as exc:
        print(f"edgemoe {args.command}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
