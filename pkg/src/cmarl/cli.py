"""Command-line interface.

Subcommands: train, evaluate, suite, oracle-check, horizon, policy-eval,
alpha-tune. Exit codes: 0 success, 1 configuration error, 2 numerical abort
or failed oracle check. Numeric output goes to files; a short human summary
goes to standard output, structured errors to standard error.

Environment overrides: ``CMARL_OUTPUT_ROOT`` (default output root) and
``CMARL_WORKERS`` (suite worker count).
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import config as config_mod
from . import experiments
from .envs import ParticleEnv, TabularMDP, random_chain
from .errors import ConfigError, NumericalAbort
from .occupation import (
    DiscountSpec,
    discounted_expectation_equivalence,
    effective_horizon_t1,
    effective_horizon_t2,
    occupation_exact,
    occupation_limits_check,
)
from .trainer import evaluate, load_actors, train

_BUILTIN_CHAINS = {
    "builtin-2state": TabularMDP(
        P=[[0.0, 1.0], [1.0, 0.0]], p0=[1.0, 0.0], c=[0.0, 1.0]
    ),
    "builtin-ergodic": TabularMDP(
        P=[[0.3, 0.7], [0.6, 0.4]], p0=[1.0, 0.0], c=[-0.5, 1.0]
    ),
}


def _output_root(args):
    if getattr(args, "out", None):
        return args.out
    return os.environ.get("CMARL_OUTPUT_ROOT", "out")


def _workers(args):
    if getattr(args, "workers", 0):
        return args.workers
    return int(os.environ.get("CMARL_WORKERS", "0"))


def build_parser():
    parser = argparse.ArgumentParser(
        prog="cmarl",
        description="Constrained multi-agent actor-critic with probabilistic "
        "safety penalties: training, evaluation, experiment suites, and "
        "numerical oracles.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    raw = argparse.RawDescriptionHelpFormatter

    p = sub.add_parser(
        "train",
        help="run one training job",
        epilog="Config keys:\n"
        + config_mod.describe_keys(("trainer", "penalty", "environment", "evaluation")),
        formatter_class=raw,
    )
    p.add_argument("--config", help="config file (defaults apply when omitted)")
    p.add_argument("--out", help="output root (default: CMARL_OUTPUT_ROOT or ./out)")
    p.add_argument("--seed", type=int, help="seed override")
    p.add_argument("-v", "--verbose", action="store_true")

    p = sub.add_parser(
        "evaluate",
        help="evaluate a checkpoint: risk report + returns",
        epilog="Config keys:\n"
        + config_mod.describe_keys(("penalty", "environment", "evaluation")),
        formatter_class=raw,
    )
    p.add_argument("--config")
    p.add_argument("--checkpoint", required=True, help="checkpoint directory (actor_*.txt)")
    p.add_argument("--episodes", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="where to write risk_report.json (default: stdout only)")

    p = sub.add_parser(
        "suite",
        help="run an experiment sweep (chance | cvar | average | all)",
        epilog="Config keys:\n" + config_mod.describe_keys(),
        formatter_class=raw,
    )
    p.add_argument("--name", required=True, choices=["chance", "cvar", "average", "all"])
    p.add_argument("--config")
    p.add_argument("--out")
    p.add_argument("--workers", type=int, default=0, help="parallel runs (default: CMARL_WORKERS or auto)")
    p.add_argument("--episodes", type=int, help="episodes per run override")
    p.add_argument("--charts", action="store_true", help="render SVG charts (needs matplotlib)")

    p = sub.add_parser(
        "oracle-check",
        help="exact occupation-measure identities on a tabular chain",
    )
    p.add_argument(
        "--chain",
        default="builtin-2state",
        choices=sorted(_BUILTIN_CHAINS) + ["random"],
    )
    p.add_argument("--states", type=int, default=10, help="state count for --chain random")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--gamma", type=float, default=0.9)
    p.add_argument("--out", help="optional CSV of the measure-distance sweep")

    p = sub.add_parser("horizon", help="effective-horizon table for a discount factor")
    p.add_argument("--gamma", type=float, required=True)
    p.add_argument("--eps", type=float, nargs="*", default=[0.5, 1.0 / np.e, 0.1])
    p.add_argument("--out", help="optional CSV of the full gamma sweep")

    p = sub.add_parser(
        "policy-eval",
        help="critic-family comparison on the linear-quadratic testbed",
        epilog="Config keys:\n" + config_mod.describe_keys(("lq",)),
        formatter_class=raw,
    )
    p.add_argument("--config")
    p.add_argument("--out")
    p.add_argument("--lambda-std", type=float, help="dual sampler std override")

    p = sub.add_parser(
        "alpha-tune",
        help="one-shot tolerance recommendation (train at alpha=0, read VaR)",
        epilog="Config keys:\n"
        + config_mod.describe_keys(("trainer", "penalty", "environment", "evaluation")),
        formatter_class=raw,
    )
    p.add_argument("--config")
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    return parser


def _cmd_train(args):
    parsed = config_mod.load_config(args.config)
    cfg = config_mod.trainer_config_from(parsed, seed=args.seed)
    run_dir = os.path.join(_output_root(args), f"run_{cfg.seed}")
    os.makedirs(run_dir, exist_ok=True)
    with open(os.path.join(run_dir, "config.snapshot"), "w") as fh:
        fh.write(config_mod.snapshot_text(cfg))
    result = train(cfg, run_dir)
    print(f"trained {cfg.episodes} episodes -> {run_dir}")
    print(f"final lambda: {result.dual.lam.tolist()}")
    if args.verbose:
        print(f"metrics: {result.metrics_path}")
        print(f"risk reports: {result.risk_reports_path}")
        print(f"checkpoints: {len(result.checkpoint_dirs)}")
    return 0


def _cmd_evaluate(args):
    parsed = config_mod.load_config(args.config)
    cfg = config_mod.trainer_config_from(parsed)
    actors = load_actors(args.checkpoint)
    env = ParticleEnv(cfg.env)
    rng = np.random.default_rng(np.random.SeedSequence([args.seed, 0xE7A]))
    report, returns = evaluate(
        actors, env, args.episodes, cfg.gamma, cfg.penalty, rng,
        report_alpha=cfg.resolved_eval_alpha(), report_beta=cfg.resolved_eval_beta(),
    )
    record = dict(report)
    record.update(returns)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "risk_report.json"), "w") as fh:
            json.dump(record, fh, indent=2)
    print(json.dumps(record, indent=2))
    return 0


def _cmd_suite(args):
    parsed = config_mod.load_config(args.config)
    base = config_mod.trainer_config_from(parsed)
    suite_cfg = parsed["suite"]
    seeds = tuple(suite_cfg["seeds"][: suite_cfg["trials"]])
    if len(seeds) < suite_cfg["trials"]:
        raise ConfigError("[suite] seeds must list at least 'trials' entries")
    # Desk-scale sweep defaults on top of the file/table defaults.
    if args.config is None:
        base = experiments.desk_base_config()
    if args.episodes:
        from dataclasses import replace

        base = replace(base, episodes=args.episodes)
    out_root = _output_root(args)
    names = ["chance", "cvar", "average"] if args.name == "all" else [args.name]
    for name in names:
        layout = experiments.run_suite(
            name, out_root, base=base, seeds=seeds, workers=_workers(args)
        )
        suite_dir = os.path.join(out_root, name)
        print(f"suite {name}: {sum(len(v) for v in layout.values())} runs -> {suite_dir}")
        if name == "cvar":
            means = experiments.bound_accuracy_table(
                suite_dir, layout, os.path.join(suite_dir, "bound_accuracy.csv")
            )
            for cfg_name, err in sorted(means.items()):
                print(f"  bound accuracy {cfg_name}: {err:.3f}")
        if args.charts or suite_cfg["charts"]:
            charts = experiments.render_suite_charts(suite_dir)
            print(f"  charts: {len(charts)} files")
    return 0


def _cmd_oracle_check(args):
    if args.chain == "random":
        mdp = random_chain(args.states, np.random.default_rng(args.seed))
    else:
        mdp = _BUILTIN_CHAINS[args.chain]
    failures = []

    def check(label, value, tol):
        ok = value < tol
        print(f"[{'PASS' if ok else 'FAIL'}] {label}: {value:.3e} (tolerance {tol:g})")
        if not ok:
            failures.append(label)

    res = occupation_exact(mdp, DiscountSpec(args.gamma))
    check("occupation normalization gap", abs(float(res.mu.sum()) - 1.0), 1e-9)
    _, _, gap = discounted_expectation_equivalence(mdp, mdp.c, DiscountSpec(args.gamma))
    check("discounted-sum / occupation-expectation gap", gap, 1e-9)
    rows = occupation_limits_check(mdp, [1e-6], stationary=False)
    check("small-gamma limit distance to p0", rows[0]["dist_p0"], 1e-5)
    try:
        rows = occupation_limits_check(mdp, [1.0 - 1e-6])
        check("large-gamma limit distance to stationary", rows[0]["dist_stationary"], 1e-4)
    except Exception as exc:  # periodic chains have no stationary limit
        print(f"[SKIP] large-gamma limit: {exc}")
    grid_ok = all(
        effective_horizon_t2(g, g ** (1.0 / (1.0 - g))) == round(effective_horizon_t1(g))
        for g in (0.5, 0.9, 0.95, 0.99, 0.995)
    )
    print(f"[{'PASS' if grid_ok else 'FAIL'}] horizon identity on the canonical grid")
    if not grid_ok:
        failures.append("horizon identity")
    if args.out:
        experiments.measure_distance_csv(args.out, mdp)
        print(f"measure-distance sweep -> {args.out}")
    return 2 if failures else 0


def _cmd_horizon(args):
    t1 = effective_horizon_t1(args.gamma)
    print(f"gamma = {args.gamma}")
    print(f"T1 (expected termination) = {t1:g}")
    print(f"{'eps':>12}  {'T2':>8}")
    for eps in args.eps:
        print(f"{eps:>12.6g}  {effective_horizon_t2(args.gamma, eps):>8d}")
    if args.out:
        experiments.horizon_sweep_csv(args.out, eps_values=tuple(args.eps))
        print(f"horizon sweep -> {args.out}")
    return 0


def _cmd_policy_eval(args):
    parsed = config_mod.load_config(args.config)
    lq = parsed["lq"]
    env_cfg = config_mod.lq_config_from(parsed)
    if args.lambda_std is not None:
        from dataclasses import replace

        env_cfg = replace(env_cfg, lambda_std=(args.lambda_std,) * len(env_cfg.lambda_std))
    study = experiments.PolicyEvalStudyConfig(
        env=env_cfg,
        episodes_train=lq["episodes_train"],
        episodes_eval=lq["episodes_eval"],
        epochs=lq["epochs"],
        batch_size=lq["batch_size"],
        lr=lq["lr"],
        seed=lq["seed"],
        solver=lq["solver"],
    )
    out_dir = os.path.join(_output_root(args), "policy_eval")
    summary = experiments.policy_eval_study(study, out_dir)
    print(f"policy-eval study -> {out_dir}")
    for kind, val in summary["mstde"].items():
        print(f"  mstde {kind}: {val:.5f}")
    print(f"  measured generic-structured gap: {summary['measured_gap']:.5f}")
    print(f"  predicted gap: {summary['predicted_gap']:.5f}")
    return 0


def _cmd_alpha_tune(args):
    parsed = config_mod.load_config(args.config)
    cfg = config_mod.trainer_config_from(parsed, seed=args.seed)
    out_dir = os.path.join(_output_root(args), f"alpha_tune_{cfg.seed}")
    rec = experiments.alpha_heuristic(cfg, out_dir)
    print(f"alpha-tune -> {out_dir}")
    print(f"recommended alpha: {rec['recommended_alpha']:.6g} (beta {rec['beta']})")
    return 0


_DISPATCH = {
    "train": _cmd_train,
    "evaluate": _cmd_evaluate,
    "suite": _cmd_suite,
    "oracle-check": _cmd_oracle_check,
    "horizon": _cmd_horizon,
    "policy-eval": _cmd_policy_eval,
    "alpha-tune": _cmd_alpha_tune,
}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _DISPATCH[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except NumericalAbort as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return 2


def run():
    sys.exit(main())
