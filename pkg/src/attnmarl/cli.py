"""Command-line entry points.

Verbs: train, eval, curves, compare, gradcheck. Exit codes: 0 success,
1 configuration error, 2 numeric failure. ATTN_MARL_THREADS caps parallelism.
"""

import argparse
import glob
import json
import sys

import numpy as np

from . import experiments
from .attn_net import grad_check, init_params
from .experiments import ConfigError
from .graph import AgentGraph, ObservationBatch
from .mlp_baseline import init_mlp_params, mlp_grad_check
from .numerics import Rng

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_NUMERIC = 2


def cmd_train(args) -> int:
    try:
        cfg = experiments.load_config(args.config)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        results = experiments.run_train(cfg)
    except FloatingPointError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    for r in results:
        print(f"seed {r['seed']}: metrics={r['metrics']} checkpoint={r['checkpoint']}")
    return EXIT_OK


def cmd_eval(args) -> int:
    try:
        if args.idm_baseline:
            if not args.scenario:
                print("--idm-baseline needs --scenario", file=sys.stderr)
                return EXIT_CONFIG
            summary = experiments.run_idm_eval(args.scenario, args.episodes,
                                               args.seed, args.trace_dir)
        else:
            if not args.checkpoint:
                print("eval needs --checkpoint (or --idm-baseline)", file=sys.stderr)
                return EXIT_CONFIG
            summary = experiments.run_eval(args.checkpoint, args.episodes,
                                           args.seed, args.trace_dir)
    except (ValueError, FileNotFoundError, KeyError) as exc:
        print(f"eval error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    print(json.dumps(summary, indent=2))
    return EXIT_OK


def cmd_curves(args) -> int:
    paths = sorted(glob.glob(args.glob))
    if not paths:
        print(f"no metrics files match {args.glob!r}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        rows = experiments.emit_curves(paths, args.out)
    except ValueError as exc:
        print(f"curves error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    print(f"wrote {args.out}/curve.csv and curve.png ({len(rows)} iterations, "
          f"{rows[0][4]} seeds)")
    return EXIT_OK


def cmd_compare(args) -> int:
    a = sorted(glob.glob(args.metrics_a))
    b = sorted(glob.glob(args.metrics_b))
    try:
        report = experiments.compare_runs(a, b)
    except ValueError as exc:
        print(f"compare error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    print(json.dumps(report, indent=2))
    return EXIT_OK


def cmd_fig3(args) -> int:
    try:
        seeds = tuple(int(s) for s in args.seeds.split(","))
        results = experiments.run_fig3(args.preset, scenario=args.scenario,
                                       seeds=seeds, iterations=args.iterations,
                                       out_dir=args.out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FloatingPointError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    for label, info in results.items():
        print(f"{label}: final median reward {info['final_median_reward']:.2f} "
              f"({len(info['metrics'])} seeds)")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    rng = Rng(args.seed)
    np_rng = np.random.default_rng(args.seed)
    try:
        if args.arch == "attn":
            n, num_classes, nv = 5, 7, 4
            obs = ObservationBatch(obs=np_rng.normal(size=(nv, n)),
                                   valid_mask=np.ones(nv, dtype=bool))
            edges = tuple((i, j, int(np_rng.integers(1, num_classes + 1)))
                          for i in range(nv) for j in range(nv))
            g = AgentGraph(agent_ids=tuple(range(nv)), edges=edges,
                           num_classes=num_classes)
            for kind in ("policy", "value"):
                params = init_params(rng.split(kind), n=n, num_classes=num_classes,
                                     action_dim=1, kind=kind)
                report = grad_check(params, obs, g, rng.split(f"probe-{kind}"),
                                    tol=args.tol)
                worst = max(report.values())
                print(f"{kind}: max rel err {worst:.3e} "
                      f"({max(report, key=report.get)})")
        else:
            for kind in ("policy", "value"):
                params = init_mlp_params(rng.split(kind), capacity=4, n=5,
                                         action_dim=1, kind=kind)
                packed = np_rng.normal(size=20)
                report = mlp_grad_check(params, packed, rng.split(f"probe-{kind}"),
                                        tol=args.tol)
                print(f"{kind}: max rel err {max(report.values()):.3e}")
    except AssertionError as exc:
        print(f"gradient check FAILED: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    print("gradient check passed")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="attnmarl",
        description="Attentional multi-agent PPO on a mixed-autonomy merge simulator")
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("train", help="train every seed of an experiment config")
    p.add_argument("--config", required=True, help="path to a JSON experiment config")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="deterministic evaluation of a checkpoint")
    p.add_argument("--checkpoint", help="checkpoint JSON path")
    p.add_argument("--episodes", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trace-dir", default=None, help="write per-episode JSONL traces here")
    p.add_argument("--idm-baseline", action="store_true",
                   help="evaluate the zero-penetration IDM reference instead")
    p.add_argument("--scenario", default=None, help="scenario for --idm-baseline")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("curves", help="aggregate per-seed metrics into mean/CI curves")
    p.add_argument("--glob", required=True, help="glob of metrics CSV files")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(fn=cmd_curves)

    p = sub.add_parser("compare", help="Welch t-test on final rewards of two runs")
    p.add_argument("metrics_a", help="glob of metrics CSVs for run A")
    p.add_argument("metrics_b", help="glob of metrics CSVs for run B")
    p.set_defaults(fn=cmd_compare)

    p = sub.add_parser("fig3", help="run a canned study: architecture comparison, "
                                    "relational-bias ablation, or edge dropout")
    p.add_argument("preset", choices=experiments.FIG3_PRESETS)
    p.add_argument("--scenario", default="mini-merge-2",
                   choices=("mini-merge-0", "mini-merge-2"))
    p.add_argument("--seeds", default="0,1,2,3,4", help="comma-separated seed list")
    p.add_argument("--iterations", type=int, default=30)
    p.add_argument("--out", default="runs/fig3")
    p.set_defaults(fn=cmd_fig3)

    p = sub.add_parser("gradcheck", help="finite-difference gradient check")
    p.add_argument("--arch", choices=("attn", "mlp"), default="attn")
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
