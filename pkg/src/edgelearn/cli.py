"""Command-line entry point: ``edgelearn run|validate|list-scenarios``."""
from __future__ import annotations

import argparse
import logging
import sys

from edgelearn.config import ConfigError, load_config
from edgelearn.harness import run_experiment
from edgelearn.scenarios import REGISTRY, list_scenarios


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="edgelearn", description="Seeded federated / continual / explainable learning experiments.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run the scenario named in a config file")
    run.add_argument("config")
    run.add_argument("--seed", type=int, default=None, help="override the config's master seed")
    run.add_argument("--out-dir", default=None, help="override the config's output directory")
    run.add_argument("--format", choices=("csv", "jsonl"), default=None)

    val = sub.add_parser("validate", help="check a config and print its normalised form")
    val.add_argument("config")

    sub.add_parser("list-scenarios", help="print the registered scenarios")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")

    if args.command == "list-scenarios":
        for name in list_scenarios():
            print(f"{name}\t{REGISTRY[name].description}")
        return 0

    try:
        cfg = load_config(args.config)
        if args.command == "run":
            overrides = {}
            if args.seed is not None:
                overrides["seed"] = args.seed
            if args.format is not None:
                overrides["format"] = args.format
            if args.out_dir is not None:
                overrides["output_dir"] = args.out_dir
            if overrides:
                cfg = cfg.replace(**overrides)
    except (ConfigError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2

    if args.command == "validate":
        print(cfg.dumps())
        return 0

    result = run_experiment(cfg)
    if result.status != 0:
        print(f"error: scenario {cfg.scenario} failed: {result.error} ({result.rows} rows written)", file=sys.stderr)
    else:
        print(f"{cfg.scenario}: {result.rows} rows -> {result.out_dir}")
    return result.status


if __name__ == "__main__":
    sys.exit(main())
