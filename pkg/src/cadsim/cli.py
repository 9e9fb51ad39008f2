"""Command-line front end: ``cadsim run``, ``cadsim oracle`` and ``cadsim bound``."""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

import yaml

from .comm import shard_count_upper_bound
from .core import GiB, ClusterConfig, ConfigError, DomainError, ModelConfig
from .experiment import (
    InfeasibleClusterError,
    UnknownStrategyError,
    load_spec,
    output_root,
    run_experiment,
    write_outputs,
)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_UNREADABLE = 3
EXIT_INVALID = 4
EXIT_UNKNOWN_STRATEGY = 5
EXIT_INFEASIBLE = 6

EPILOG = f"""\
exit codes:
  {EXIT_OK}  success
  {EXIT_USAGE}  bad command-line usage
  {EXIT_UNREADABLE}  spec or config file missing or unreadable
  {EXIT_INVALID}  spec or config failed validation
  {EXIT_UNKNOWN_STRATEGY}  spec names an unknown strategy
  {EXIT_INFEASIBLE}  cluster layout cannot host the requested parallelism

environment:
  CADSIM_OUT  output root; overrides --out
"""


def _read_mapping(path: str) -> dict:
    data = yaml.safe_load(Path(path).read_text())
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a mapping")
    return data


def cmd_run(args) -> int:
    spec = load_spec(args.spec)
    if args.seed is not None:
        spec = replace(spec, seed=args.seed)
    result = run_experiment(spec, jobs=args.jobs, keep_records=spec.export_plans)
    out = write_outputs(result, output_root(args.out))
    print(result.table())
    print(f"\nwrote {out}")
    return EXIT_OK


def cmd_oracle(args) -> int:
    from . import oracles

    if args.name == "vmin":
        rep = oracles.vmin_oracle(args.n or 100, args.seed or 0)
        print(f"queries: {rep.queries}")
        print(f"max byte excess over grid search: {rep.max_excess:.6%}")
        print(f"constraint violations: {len(rep.violations)}")
        for v in rep.violations[:20]:
            print(f"  {v}")
        return EXIT_OK
    if args.name == "scheduler":
        rep = oracles.scheduler_oracle(args.n or 1000, args.seed or 0)
        print(f"instances: {rep.instances}")
        print(f"within 15% of optimum: {rep.within} ({rep.fraction_within:.1%})")
        print("gap histogram (greedy max load / optimum - 1):")
        for label, count in rep.histogram():
            print(f"  {label:>14} {count}")
        return EXIT_OK
    rep = oracles.flops_oracle(args.n or 256)
    print(f"row ranges checked: {rep.cases}")
    print("2 * enumerated pairs == n_q * (2 n_kv - n_q) + n_q on every case" if rep.ok else f"mismatches: {rep.mismatches[:10]}")
    return EXIT_OK


def cmd_bound(args) -> int:
    model = ModelConfig.from_dict(_read_mapping(args.model)) if args.model else ModelConfig.from_dict({"preset": "llama-34b"})
    cluster_data = _read_mapping(args.cluster) if args.cluster else {"num_gpus": 1}
    if args.bandwidth is not None:
        cluster_data["interconnect_bandwidth"] = args.bandwidth * GiB
    cluster = ClusterConfig.from_dict(cluster_data)
    b = shard_count_upper_bound(model, cluster)
    print(f"per-token context-independent FLOPs: {b.per_token_flops}")
    print(f"per-token compute time t: {b.token_time:.6e} s")
    if b.communication_bound:
        print("communication-bound even unsharded: t*B does not cover one token's query bytes")
    else:
        print(f"shard bound s: {b.bound}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cadsim",
        description="Simulate core-attention disaggregation against packing baselines.",
        epilog=EPILOG,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run an experiment spec", epilog=EPILOG,
                         formatter_class=argparse.RawDescriptionHelpFormatter)
    run.add_argument("spec", help="YAML experiment spec")
    run.add_argument("--out", help="output root (default ./cadsim_out)")
    run.add_argument("--seed", type=int, help="override the spec seed (unsigned 64-bit)")
    run.add_argument("--jobs", type=int, default=1, help="batches simulated in parallel")
    run.set_defaults(func=cmd_run)

    oracle = sub.add_parser("oracle", help="compare fast paths with brute force", epilog=EPILOG,
                            formatter_class=argparse.RawDescriptionHelpFormatter)
    oracle.add_argument("name", choices=["vmin", "scheduler", "flops"])
    oracle.add_argument("--n", type=int, help="number of cases (flops: largest document length)")
    oracle.add_argument("--seed", type=int)
    oracle.set_defaults(func=cmd_oracle)

    bound = sub.add_parser("bound", help="print the shard-count upper bound", epilog=EPILOG,
                           formatter_class=argparse.RawDescriptionHelpFormatter)
    bound.add_argument("--model", help="model YAML (fields or {preset: name}); default llama-34b")
    bound.add_argument("--cluster", help="cluster YAML; default one GPU with stock settings")
    bound.add_argument("--bandwidth", type=float, help="override bandwidth in GiB/s")
    bound.set_defaults(func=cmd_bound)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "seed", None) is not None and not 0 <= args.seed < 2**64:
        parser.error("--seed must fit in an unsigned 64-bit integer")
    if getattr(args, "jobs", 1) < 1:
        parser.error("--jobs must be >= 1")
    try:
        return args.func(args)
    except OSError as exc:
        print(f"error: cannot read input: {exc}", file=sys.stderr)
        return EXIT_UNREADABLE
    except UnknownStrategyError as exc:
        print(f"error: unknown strategy: {exc}", file=sys.stderr)
        return EXIT_UNKNOWN_STRATEGY
    except InfeasibleClusterError as exc:
        print(f"error: infeasible cluster: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (ConfigError, DomainError, yaml.YAMLError, KeyError, TypeError, ValueError) as exc:
        print(f"error: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
