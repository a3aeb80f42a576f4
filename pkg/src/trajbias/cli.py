"""Command-line entry point for the experiment pipeline.

Usage:
  trajbias --config experiment.yaml --stage all
  trajbias --config experiment.yaml --stage evaluate --out runs/seed1 --seed 1

Exit codes: 0 success, 2 config error, 3 missing artifact, 4 numerical divergence.
"""

from __future__ import annotations

import argparse
import logging
import sys

from .artifacts import MissingArtifactError
from .cohort import ConfigError
from .config import ExperimentConfigError, load_config
from .model import DivergenceError
from .pipeline import STAGES, run_stages

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_DIVERGED = 0, 2, 3, 4


def build_parser():
    parser = argparse.ArgumentParser(
        prog="trajbias",
        description="Train and evaluate trajectory-bias-compensating patient embeddings.",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="Stages: " + " -> ".join(STAGES) + "; 'all' runs them in order.",
    )
    parser.add_argument("--config", required=True, help="YAML experiment file")
    parser.add_argument("--stage", default="all", choices=STAGES + ("all",), help="stage to run (default: all)")
    parser.add_argument("--seed", type=int, default=None, help="global seed, overrides the config value")
    parser.add_argument("--out", default=None, help="output directory, overrides the config value")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    if args.seed is not None and not 0 <= args.seed < 2 ** 64:
        print("error: --seed must be an unsigned 64-bit integer", file=sys.stderr)
        return EXIT_CONFIG
    try:
        cfg = load_config(args.config, seed=args.seed, output_dir=args.out)
        stages = STAGES if args.stage == "all" else (args.stage,)
        run = run_stages(cfg, stages)
    except (ExperimentConfigError, ConfigError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingArtifactError as exc:
        print(f"missing artifact: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except DivergenceError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    print(f"done: {', '.join(stages)} -> {run.out}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
