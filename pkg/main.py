"""Command line entry point.

    python main.py exp --config configs/desk.json --out runs/desk --seed 3

Exit codes: 0 success, 2 configuration error, 3 runtime or numeric error.
"""
import argparse
import json
import sys

from config import load_config
from errors import ConfigError, LowRankError
from experiment import METRIC_STAGES, run_experiment

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3

# Subcommand -> (metric stages, whether models are retrained even if checkpoints exist in --out).
COMMANDS = {
    "train": (("clean",), True),
    "attack": (("clean", "attacks", "min_perturbation"), False),
    "noise": (("clean", "noise"), False),
    "cushion": (("cushion",), False),
    "spectrum": (("spectrum",), False),
    "compress": (("clean", "compression"), False),
    "exp": (METRIC_STAGES, True),
}


def build_parser():
    parser = argparse.ArgumentParser(
        description="Low-rank regularized classifiers and their robustness/compression metrics"
    )
    subparsers = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub = subparsers.add_parser(name)
        sub.add_argument("--config", required=True, help="path to the JSON experiment config")
        sub.add_argument("--out", default=None, help="output directory (overrides output_dir)")
        sub.add_argument("--seed", type=int, default=None, help="master seed (overrides seed)")
        sub.add_argument("--quiet", action="store_true", help="no progress output")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, seed=args.seed, output_dir=args.out)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    if args.quiet:
        cfg.verbose = False

    requested, force_train = COMMANDS[args.command]
    if cfg.verbose:
        print(f"Random Seed: {cfg.seed}")
    try:
        results = run_experiment(cfg, requested=requested, force_train=force_train)
    except (LowRankError, ValueError, RuntimeError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME

    if cfg.verbose and "clean" in results:
        print(json.dumps(results["clean"], indent=2, sort_keys=True))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
