"""Command-line entry point: ``afin {simulate,train,eval,gradcheck,oracle-check}``."""
from __future__ import annotations

import argparse
import collections
import csv
import json
import sys
from pathlib import Path

import numpy as np
import torch

from .config import RunConfig, build_config
from .factors import conjugate_posterior_oracle, is_conjugate, read_tasks
from .network import AFIN, FlowProposal, ModelConfig
from .simulator import SimulatorConfig, rng_stream, simulate_task
from .training import (
    SCHEMA_VERSION,
    Trainer,
    TrainingAborted,
    build_model,
    finite_difference_check,
    heldout_tasks,
    load_model,
    perturbed_copy,
)

PURPOSE_CLI_TASKS = 3


def _emit(obj: dict) -> None:
    print(json.dumps(obj, sort_keys=True))


def _config(args) -> RunConfig:
    overrides: dict = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "out", None) is not None and args.command == "train":
        overrides["out_dir"] = args.out
    if getattr(args, "steps", None) is not None:
        overrides.setdefault("train", {})["steps"] = args.steps
    if getattr(args, "threads", None) is not None:
        overrides["threads"] = args.threads
    cfg = build_config(args.profile, args.config, overrides)
    torch.set_num_threads(cfg.threads)
    return cfg


def simulate_tasks(sim_cfg: SimulatorConfig, seed: int, count: int):
    return [simulate_task(sim_cfg, rng_stream(seed, PURPOSE_CLI_TASKS, i)) for i in range(count)]


def cmd_simulate(args) -> int:
    cfg = _config(args)
    tasks = simulate_tasks(cfg.simulator, cfg.seed, args.count)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with out.open("w") as fh:
        for task in tasks:
            doc = {"schema_version": SCHEMA_VERSION, "seed": cfg.seed, **task.to_json()}
            fh.write(json.dumps(doc) + "\n")
    hist_d = collections.Counter(t.d for t in tasks)
    hist_n = collections.Counter(t.N for t in tasks)
    hist_t = collections.Counter(f.factor_type.value for t in tasks for f in t.factors)
    _emit({
        "schema_version": SCHEMA_VERSION,
        "seed": cfg.seed,
        "command": "simulate",
        "count": len(tasks),
        "out": str(out),
        "conjugate": sum(is_conjugate(t) for t in tasks),
        "d": {str(k): v for k, v in sorted(hist_d.items())},
        "N": {str(k): v for k, v in sorted(hist_n.items())},
        "types": dict(sorted(hist_t.items())),
    })
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "run_config.json").write_text(json.dumps(cfg.to_json(), indent=2))
    if args.resume:
        trainer = Trainer.resume(args.resume, out)
    else:
        trainer = Trainer(cfg.model, cfg.train, cfg.simulator, out)

    def progress(row):
        _emit({"schema_version": SCHEMA_VERSION, "seed": cfg.seed, **row})

    try:
        trainer.run(until=args.until, progress=None if args.quiet else progress)
    except TrainingAborted as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return 2
    _emit({
        "schema_version": SCHEMA_VERSION,
        "seed": cfg.seed,
        "command": "train",
        "step": trainer.step,
        "checkpoint": str(out / "checkpoint.afin"),
    })
    return 0


def cmd_eval(args) -> int:
    cfg = _config(args)
    from .evaluation import run_evaluation

    model = load_model(args.checkpoint, use_ema=not args.live)
    tasks = read_tasks(args.tasks)
    if args.limit is not None:
        tasks = tasks[: args.limit]
    methods = args.methods.split(",") if args.methods else list(cfg.eval.methods)
    budgets = [int(b) for b in args.budgets.split(",")] if args.budgets else list(cfg.eval.budgets)
    proposals = None
    if any(m.startswith("afin") for m in methods):
        if model.flow is not None:
            proposals = [FlowProposal(model, t) for t in tasks]
        else:
            proposals = [model.gaussian_posterior(t) for t in tasks]

    def notice(msg):
        print(msg, file=sys.stderr)

    rows = run_evaluation(
        tasks, methods, budgets, proposals, cfg.seed,
        R=cfg.eval.projections, ref_samples=cfg.eval.ref_samples,
        ref_mcmc_iters=cfg.eval.ref_mcmc_iters, notice=notice,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with (out / "report.jsonl").open("w") as fh:
        for row in rows:
            fh.write(json.dumps({"schema_version": SCHEMA_VERSION, "seed": cfg.seed, **row}) + "\n")
    keys = ["m1", "m2", "sw2", "pareto_k", "max_weight", "entropy_ratio", "energy_gap", "wallclock_s"]
    groups: dict[tuple, list] = collections.OrderedDict()
    for row in rows:
        groups.setdefault((row["method"], row["budget"]), []).append(row)
    with (out / "aggregate.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["schema_version", "seed", "method", "budget", "n_tasks"] + [f"mean_{k}" for k in keys])
        for (method, budget), rs in groups.items():
            means = [float(np.nanmean([r[k] for r in rs])) if any(np.isfinite(r[k]) for r in rs) else float("nan")
                     for k in keys]
            w.writerow([SCHEMA_VERSION, cfg.seed, method, budget, len(rs)] + means)
    _emit({
        "schema_version": SCHEMA_VERSION,
        "seed": cfg.seed,
        "command": "eval",
        "rows": len(rows),
        "report": str(out / "report.jsonl"),
        "aggregate": str(out / "aggregate.csv"),
    })
    return 0


def _corrupt(grads):
    name = next(iter(grads))
    grads = dict(grads)
    grads[name] = grads[name] + 1.0
    return grads


def cmd_gradcheck(args) -> int:
    cfg = _config(args)
    variants = ["gaussian", "flow"] if args.decoder == "both" else [args.decoder]
    worst = (0.0, "", "")
    ok = True
    per_variant = max(1, args.n_probes // len(variants))
    for i, variant in enumerate(variants):
        mc = ModelConfig.from_json({**cfg.model.to_json(), "decoder": variant})
        model = perturbed_copy(build_model(mc, cfg.seed), scale=0.1, seed=cfg.seed + i)
        tasks = heldout_tasks(cfg.simulator, cfg.seed + i, args.tasks)
        probes = None
        if args.corrupt:
            name, _ = next(iter(model.named_parameters()))
            probes = [(name, 0)]
        report = finite_difference_check(
            model, tasks, n_probes=per_variant, h=args.h, seed=cfg.seed + i,
            probes=probes, grad_hook=_corrupt if args.corrupt else None,
        )
        passed = report.passed(args.tol)
        ok &= passed
        if report.max_rel_error >= worst[0]:
            worst = (report.max_rel_error, variant, report.worst)
        _emit({
            "schema_version": SCHEMA_VERSION, "seed": cfg.seed, "command": "gradcheck", "decoder": variant,
            "probes": len(report.probes), "max_rel_error": report.max_rel_error, "worst": report.worst,
            "passed": passed,
        })
    if not ok:
        print(f"gradcheck FAILED: worst relative error {worst[0]:.3e} at {worst[1]}:{worst[2]}", file=sys.stderr)
        return 1
    return 0


def cmd_oracle_check(args) -> int:
    cfg = _config(args)
    from .quadrature import quadrature_moments

    sim = SimulatorConfig.from_json({
        **cfg.simulator.to_json(),
        "d_min": 1, "d_max": 2, "N_min": 1, "N_max": min(cfg.simulator.N_max, 16),
        "prior_types": ["diag_gaussian", "fullrank_gaussian"],
        "likelihood_types": ["lin_gaussian", "gaussian"],
    })
    worst = (0.0, -1)
    for i in range(args.count):
        task = simulate_task(sim, rng_stream(cfg.seed, PURPOSE_CLI_TASKS + 1, i))
        oracle = conjugate_posterior_oracle(task)
        quad = quadrature_moments(task)
        err = max(np.abs(oracle.mean - quad.mean).max(), np.abs(oracle.covariance - quad.covariance).max())
        if err >= worst[0]:
            worst = (float(err), i)
    passed = worst[0] < args.tol
    _emit({
        "schema_version": SCHEMA_VERSION, "seed": cfg.seed, "command": "oracle-check", "tasks": args.count,
        "max_abs_error": worst[0], "worst_task": worst[1], "passed": passed,
    })
    if not passed:
        print(f"oracle-check FAILED: error {worst[0]:.3e} on task {worst[1]}", file=sys.stderr)
        return 1
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="afin", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--profile", choices=["paper-default", "toy"], help="built-in defaults")
        p.add_argument("--seed", type=int)
        p.add_argument("--threads", type=int, help="cap on torch intra-op threads")

    p = sub.add_parser("simulate", help="write simulated tasks as JSON lines")
    common(p)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", help="train a network")
    common(p)
    p.add_argument("--out", help="run directory")
    p.add_argument("--steps", type=int, help="total optimizer steps")
    p.add_argument("--until", type=int, help="stop early at this step (resumable)")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a task file")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--tasks", required=True)
    p.add_argument("--methods", help="comma-separated subset of afin,afin+snis,mcmc,oracle")
    p.add_argument("--budgets", help="comma-separated sample budgets")
    p.add_argument("--limit", type=int, help="evaluate only the first tasks")
    p.add_argument("--live", action="store_true", help="use live weights instead of EMA")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="compare autograd with finite differences")
    common(p)
    p.add_argument("--decoder", choices=["gaussian", "flow", "both"], default="both")
    p.add_argument("--n-probes", type=int, default=200)
    p.add_argument("--tasks", type=int, default=4)
    p.add_argument("--h", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--corrupt", action="store_true", help="negative control: perturb analytic gradients")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("oracle-check", help="closed-form posterior vs grid quadrature")
    common(p)
    p.add_argument("--count", type=int, default=100)
    p.add_argument("--tol", type=float, default=1e-6)
    p.set_defaults(func=cmd_oracle_check)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        print(f"afin {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
