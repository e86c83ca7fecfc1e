"""Command-line entry point.

Subcommands:
  train <config.json>      one training run
  matrix <config.json>     arch x depth x sn x seed sweep
  eval <checkpoint.npz>    evaluate a saved agent
  diagnose <checkpoint.npz>  singular-value / Lipschitz report

Any config field can be overridden with --set dotted.path=value. The run
directory root defaults to ./runs or $SMOOTHCRITIC_RUN_ROOT.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from .errors import ConfigError
from .runner import (AgentConfig, default_run_root, evaluate_policy,
                     load_agent_checkpoint, run_experiment, run_matrix)
from .specnorm import lipschitz_bound, singular_value_report, write_singular_value_csv


def _load_config(args) -> AgentConfig:
    config = AgentConfig.from_json_file(args.config)
    for override in args.set or []:
        if "=" not in override:
            raise ConfigError(f"--set expects key=value, got {override!r}")
        key, _, value = override.partition("=")
        config.apply_override(key, value)
    config.validate()
    return config


def _cmd_train(args) -> int:
    config = _load_config(args)
    run_dir = args.run_dir or os.path.join(
        default_run_root(), f"{config.algorithm}_{config.env_id}_s{config.seed}")
    result = run_experiment(
        config, run_dir,
        progress_cb=lambda step, ret: print(f"step {step}: eval return {ret:.1f}"))
    print(f"run dir: {result.run_dir}")
    print(f"final return: {result.final_return:.1f}")
    if result.crash_step is not None:
        print(f"CRASH at env step {result.crash_step}")
        return 2
    return 0


def _cmd_matrix(args) -> int:
    template = _load_config(args)
    run_root = args.run_dir or os.path.join(default_run_root(), "matrix")
    rows = run_matrix(
        template, run_root,
        archs=args.archs.split(",") if args.archs else None,
        depths=[int(d) for d in args.depths.split(",")] if args.depths else None,
        sn=[s == "on" for s in args.sn.split(",")] if args.sn else None,
        seeds=[int(s) for s in args.seeds.split(",")] if args.seeds else None,
        progress_cb=lambda cell, ret: print(f"{cell}: final return {ret:.1f}"))
    for row in rows:
        print(f"{row['arch']} depth={row['depth']} sn={row['sn']}: "
              f"{row['mean_final_return']:.1f} +- {row['stderr']:.1f} "
              f"({row['crashes']} crashes)")
    return 0


def _cmd_eval(args) -> int:
    agent, config = load_agent_checkpoint(args.checkpoint)
    mean_ret = evaluate_policy(agent, config.env_id, args.episodes,
                               np.random.default_rng(args.seed))
    print(f"mean return over {args.episodes} episodes: {mean_ret:.1f}")
    return 0


def _cmd_diagnose(args) -> int:
    agent, _config = load_agent_checkpoint(args.checkpoint)
    heads = [("actor", agent.policy.actor)] + [
        (f"critic{i}", c) for i, c in enumerate(agent.critics.critics)]
    for name, head in heads:
        print(f"[{name}] Lipschitz bound (norm ignored): "
              f"{lipschitz_bound(head, 'ignore'):.4g}; "
              f"conservative: {lipschitz_bound(head, 'conservative'):.4g}")
        rows = singular_value_report(head)
        for r in rows:
            hat = "-" if not r["sn_active"] else f"{r['sigma_hat']:.4f}"
            print(f"  layer {r['layer']}: sigma_hat={hat} "
                  f"raw={r['sigma_exact_raw']:.4f} "
                  f"effective={r['sigma_exact_effective']:.4f}")
        if args.csv:
            write_singular_value_csv(f"{args.csv}.{name}.csv", rows)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="smoothcritic",
        description="Desk-scale actor-critic training with spectral normalization")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="run one training experiment")
    p_train.add_argument("config")
    p_train.add_argument("--run-dir")
    p_train.add_argument("--set", action="append", metavar="KEY=VALUE")
    p_train.set_defaults(fn=_cmd_train)

    p_matrix = sub.add_parser("matrix", help="run an arch/depth/sn/seed sweep")
    p_matrix.add_argument("config")
    p_matrix.add_argument("--run-dir")
    p_matrix.add_argument("--set", action="append", metavar="KEY=VALUE")
    p_matrix.add_argument("--archs", help="comma list: mlp,modern")
    p_matrix.add_argument("--depths", help="comma list of ints")
    p_matrix.add_argument("--sn", help="comma list of on/off")
    p_matrix.add_argument("--seeds", help="comma list of ints")
    p_matrix.set_defaults(fn=_cmd_matrix)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint")
    p_eval.add_argument("checkpoint")
    p_eval.add_argument("--episodes", type=int, default=10)
    p_eval.add_argument("--seed", type=int, default=0)
    p_eval.set_defaults(fn=_cmd_eval)

    p_diag = sub.add_parser("diagnose", help="singular-value/Lipschitz report")
    p_diag.add_argument("checkpoint")
    p_diag.add_argument("--csv", help="basename for per-head CSV reports")
    p_diag.set_defaults(fn=_cmd_diagnose)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
