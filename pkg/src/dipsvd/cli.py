"""Command-line entry points.

Subcommands: ``compress``, ``allocate``, ``verify-loss``, ``report``.
Exit codes: 0 success, 1 config error, 2 numerical failure, 3 infeasible
budget. The environment variable ``DIPSVD_SEED`` overrides the configured
seed for any command.
"""
from __future__ import annotations

import argparse
import json
import os
import sys

from .errors import ConfigError, DipsvdError, InfeasibleBudgetError
from .pipeline import RunConfig, render_report, run_allocate, run_compress, run_verify_loss

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_NUMERICAL = 2
EXIT_INFEASIBLE = 3


def _add_common(parser):
    parser.add_argument("--model", required=True,
                        help="model spec JSON or saved model directory")
    parser.add_argument("--calibration", default="synthetic",
                        help="matrix file (DSVD/CSV) or 'synthetic'")
    parser.add_argument("--k", type=float, default=0.3,
                        help="global compression ratio: fraction of parameters removed")
    parser.add_argument("--amplify", "--a", type=float, default=30.0,
                        help="importance amplification factor for top channels")
    parser.add_argument("--top-fraction", "--p", type=float, default=0.03,
                        help="fraction of channels to amplify")
    parser.add_argument("--beta", type=float, default=0.25,
                        help="sensitivity-vs-rank trade-off in combined scores")
    parser.add_argument("--tau", type=float, default=0.95,
                        help="cumulative energy threshold for effective rank")
    parser.add_argument("--energy", choices=("squares", "values"), default="squares",
                        help="effective-rank energy mode")
    parser.add_argument("--p-min", type=float, default=0.25,
                        help="lower bound on per-layer preserved fraction")
    parser.add_argument("--damping", "--lambda", type=float, default=None,
                        help="Gram ridge; defaults to 1e-6*trace(G)/n per weight")
    parser.add_argument("--allocator", choices=("heuristic", "bayes", "uniform"),
                        default="heuristic")
    parser.add_argument("--whitening", choices=("channel-weighted", "plain", "none"),
                        default="channel-weighted")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--bo-budget", type=int, default=64,
                        help="Bayesian optimization evaluation budget")
    parser.add_argument("--bo-seed", type=int, default=None,
                        help="separate seed for the Bayesian search")
    parser.add_argument("--surrogate", choices=("gp-ei", "random-search"),
                        default="gp-ei")
    parser.add_argument("--out", default=None, help="output directory")


def _config_from_args(args):
    seed = args.seed
    env_seed = os.environ.get("DIPSVD_SEED")
    if env_seed is not None:
        try:
            seed = int(env_seed)
        except ValueError:
            raise ConfigError(f"DIPSVD_SEED must be an integer, got {env_seed!r}")
    return RunConfig(
        model_spec=getattr(args, "model", None),
        calibration=args.calibration,
        k=args.k,
        amplify=args.amplify,
        top_fraction=args.top_fraction,
        beta=args.beta,
        tau=args.tau,
        p_min=args.p_min,
        damping=args.damping,
        allocator=args.allocator,
        whitening=args.whitening,
        energy_mode=args.energy,
        seed=seed,
        bo_budget=args.bo_budget,
        bo_seed=args.bo_seed,
        surrogate=args.surrogate,
        verify_instances=getattr(args, "instances", 100),
        output_dir=args.out,
    ).validate()


def build_parser():
    parser = argparse.ArgumentParser(
        prog="dipsvd",
        description="Dual-importance-protected SVD compression of layered linear models",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_compress = sub.add_parser("compress", help="run the full compression pipeline")
    _add_common(p_compress)

    p_alloc = sub.add_parser("allocate", help="compute layer scores and a compression plan")
    _add_common(p_alloc)

    p_verify = sub.add_parser("verify-loss", help="randomized truncation-loss identity suite")
    p_verify.add_argument("--instances", type=int, default=100)
    p_verify.add_argument("--seed", type=int, default=0)
    p_verify.add_argument("--amplify", type=float, default=30.0)
    p_verify.add_argument("--top-fraction", type=float, default=0.03)
    p_verify.add_argument("--damping", type=float, default=None)
    p_verify.add_argument("--out", default=None)

    p_report = sub.add_parser("report", help="render a report JSON as a table")
    p_report.add_argument("--input", required=True, help="path to report.json")
    return parser


def _cmd_compress(args):
    cfg = _config_from_args(args)
    report = run_compress(cfg)
    print(render_report(report))
    if cfg.output_dir:
        print(f"artifacts written to {cfg.output_dir}")
    return EXIT_OK


def _cmd_allocate(args):
    cfg = _config_from_args(args)
    record = run_allocate(cfg)
    scores = record["scores"]
    print(f"{'layer':>5} {'fisher':>12} {'eff_rank':>10} {'combined':>12} {'preserve':>10}")
    for li, (f, r, q, p) in enumerate(zip(
        scores["fisher"], scores["effective_rank"], scores["combined"],
        record["plan"]["preserve"],
    )):
        print(f"{li:>5} {f:>12.6g} {r:>10.4g} {q:>12.6g} {p:>10.4f}")
    if record["correlation"] is not None:
        print(f"heuristic-vs-BO Pearson correlation: {record['correlation']:.4f}")
    return EXIT_OK


def _cmd_verify_loss(args):
    cfg = RunConfig(
        model_spec=None,
        seed=int(os.environ.get("DIPSVD_SEED", args.seed)),
        amplify=args.amplify,
        top_fraction=args.top_fraction,
        damping=args.damping,
        verify_instances=args.instances,
        output_dir=args.out,
    ).validate()
    record = run_verify_loss(cfg)
    print(f"instances: {record['instances']}  damping: {record['damping']}")
    print(f"max single-triple deviation: {record['max_single_triple_deviation']:.3e}")
    print(f"max subset deviation:        {record['max_subset_deviation']:.3e}")
    for err in record["errors"]:
        print(f"surfaced: {err}")
    print(f"result: {record['passed']}")
    if record["passed"] is False:
        return EXIT_NUMERICAL
    return EXIT_OK


def _cmd_report(args):
    with open(args.input, "r", encoding="utf-8") as fh:
        report = json.load(fh)
    print(render_report(report))
    return EXIT_OK


_COMMANDS = {
    "compress": _cmd_compress,
    "allocate": _cmd_allocate,
    "verify-loss": _cmd_verify_loss,
    "report": _cmd_report,
}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except InfeasibleBudgetError as exc:
        print(f"infeasible budget: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except DipsvdError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
