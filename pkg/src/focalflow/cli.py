"""focalflow command line: gen, train, eval, verify, sweep.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
Outputs go under ``$FOCALFLOW_OUT`` (default ``./focalflow_out``) unless a
path is given explicitly.
"""

import argparse
import json
import os
import sys
from pathlib import Path

import yaml

from . import _rng
from .config import DEFAULTS, apply_overrides, dump_config, load_config, merge, resolve
from .errors import ConfigurationError, FocalFlowError
from .evaluation import (
    evaluate_policy, write_aggregate_csv, write_curves_csv, write_episode_csv,
)
from .experiments import build_dataset, evaluate_run, run_sweep
from .trajectory import TASKS, generate_expert, load_demos, save_demos
from .training import load_checkpoint, run_training
from .verification import CHECKS, all_passed, json_default, report_json, run_checks


class UsageError(Exception):
    pass


def out_root():
    return Path(os.environ.get("FOCALFLOW_OUT", "focalflow_out"))


def cmd_gen(args):
    demos = generate_expert(args.task, args.seed, args.count, args.length)
    out = Path(args.out) if args.out else out_root() / "demos" / f"{args.task}_seed{args.seed}.jsonl"
    save_demos(demos, out)
    print(f"wrote {len(demos)} demonstrations to {out}")
    return 0


def cmd_train(args):
    if not args.config:
        raise UsageError("train needs --config <path>")
    cfg = apply_overrides(load_config(args.config), args.set)
    run = resolve(cfg, args.variant)
    name = args.name or f"{run.data.task}_{run.train.objective.variant}_seed{run.train.seed}"
    out = Path(args.out) if args.out else out_root() / "runs" / name
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(dump_config(run.raw))
    dataset = build_dataset(run.data)
    resume = args.resume
    if resume is None and args.resume_latest and (out / "checkpoint.json").exists():
        resume = out / "checkpoint.json"
    result = run_training(run.train, dataset, out_dir=out, resume=resume, stop_at=args.stop_at)
    metrics, _ = evaluate_run(result.state, dataset, run)
    (out / "eval.json").write_text(json.dumps(metrics, indent=2, sort_keys=True))
    print(f"trained {result.state.step} steps; final loss {result.summary['final_loss_total']:.6g}")
    print(f"held-out {run.eval.mode} endpoint error {metrics['endpoint_error']:.6g}")
    print(f"outputs in {out}")
    return 0


def cmd_eval(args):
    ckpt = load_checkpoint(args.ckpt)
    demos = load_demos(args.demos)
    if not demos:
        raise ConfigurationError(f"{args.demos} contains no demonstrations")
    policy = ckpt.policy(use_ema=not args.live, inference=args.inference)
    reports, traces, agg = evaluate_policy(
        policy, demos, args.episodes, args.mode, args.exec_steps,
        rng=_rng.stream(args.seed, "eval"), tolerance=args.tolerance,
    )
    out = Path(args.out) if args.out else out_root() / "eval" / Path(args.ckpt).stem
    write_episode_csv(out / "episodes.csv", reports)
    write_aggregate_csv(out / "aggregate.csv", agg, {"mode": args.mode, "episodes": args.episodes})
    write_curves_csv(out / "curves.csv", reports)
    with (out / "traces.jsonl").open("w") as fh:
        for t in traces:
            fh.write(t.to_json() + "\n")
    print(f"{args.mode}: endpoint error {agg.endpoint_error:.6g}, ATV {agg.atv:.6g}, "
          f"success {agg.success_rate:.3f}, NFE/decision {agg.nfe_per_decision}")
    print(f"outputs in {out}")
    return 0


def cmd_verify(args):
    results = run_checks(args.only, seed=args.seed)
    for r in results:
        print(r.line())
        print("  " + json.dumps(r.measured, default=json_default, sort_keys=True))
    if args.json:
        Path(args.json).write_text(report_json(results))
    ok = all_passed(results)
    print(f"{'all checks passed' if ok else 'verification FAILED'} (seed={args.seed})")
    return 0 if ok else 1


def cmd_sweep(args):
    path = Path(args.grid)
    if not path.exists():
        raise ConfigurationError(f"grid file {path} does not exist")
    doc = yaml.safe_load(path.read_text()) or {}
    grid = doc.get("grid")
    if not isinstance(grid, dict) or not grid:
        raise ConfigurationError(f"{path}: needs a non-empty 'grid' mapping of section.key: [values]")
    base = doc.get("base") or {}
    if isinstance(base, str):
        base = yaml.safe_load((path.parent / base).read_text()) or {}
    base = apply_overrides(merge(DEFAULTS, base), args.set)
    out = Path(args.out) if args.out else out_root() / "sweeps" / path.stem
    rows = run_sweep(base, grid, out, progress=lambda n, s: print(f"{s:8s} {n}"))
    print(f"{len(rows)} points; summary in {out / 'summary.csv'}")
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="focalflow", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate synthetic expert demonstrations")
    g.add_argument("--task", choices=TASKS, default="reach")
    g.add_argument("--count", type=int, default=10)
    g.add_argument("--length", type=int, default=200)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train a policy from a YAML config")
    t.add_argument("--config")
    t.add_argument("--variant")
    t.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE")
    t.add_argument("--out")
    t.add_argument("--name")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--resume-latest", action="store_true",
                   help="continue from OUT/checkpoint.json when present")
    t.add_argument("--stop-at", type=int, metavar="STEP",
                   help="checkpoint and stop after STEP steps")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on demonstrations")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--demos", required=True)
    e.add_argument("--mode", choices=("open_loop", "closed_loop"), default="closed_loop")
    e.add_argument("--episodes", type=int, default=20)
    e.add_argument("--exec-steps", type=int, default=4)
    e.add_argument("--tolerance", type=float, default=0.05)
    e.add_argument("--inference", choices=("one_step", "euler"), default="one_step")
    e.add_argument("--live", action="store_true", help="use live instead of EMA parameters")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    v = sub.add_parser("verify", help="run the numerical property checks")
    v.add_argument("--only", action="append", choices=list(CHECKS))
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--json", help="also write a JSON report here")
    v.set_defaults(func=cmd_verify)

    s = sub.add_parser("sweep", help="run a grid of config overrides")
    s.add_argument("--grid", required=True)
    s.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE")
    s.add_argument("--out")
    s.set_defaults(func=cmd_sweep)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"focalflow: error: {exc}", file=sys.stderr)
        return 2
    except ConfigurationError as exc:
        print(f"focalflow: configuration error: {exc}", file=sys.stderr)
        return 2
    except (FocalFlowError, OSError, ValueError) as exc:
        print(f"focalflow: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
