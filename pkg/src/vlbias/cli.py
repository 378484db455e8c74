"""Command-line entry point: ``vlbias <experiment> --config FILE``.

Exit status: 0 on success, 2 for an unreadable or invalid config (one
``field: problem`` line per error), 1 for a failure while running.
Errors go to stderr as a JSON object.
"""
from __future__ import annotations

import argparse
import json
import sys
from typing import Optional, Sequence

from .config import EXPERIMENTS, ConfigError, json_schema, load_config

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2


def _report(status: str, errors: list[str]) -> None:
    print(json.dumps({"status": status, "errors": errors}, indent=1), file=sys.stderr)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vlbias", description="Gender-bias measurement and mediation on a planted toy detector.")
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("run", *EXPERIMENTS):
        help_text = "run the experiment named in the config" if name == "run" else f"run a {name} experiment"
        s = sub.add_parser(name, help=help_text)
        s.add_argument("--config", required=True, help="YAML or JSON experiment config")
        s.add_argument("--out", help="output directory (overrides the config's 'output')")
        s.add_argument("--seed-override", type=int, help="set the model, data and baseline seeds")
        s.add_argument("--threads", type=int, help="dataset-parallel workers (results do not depend on it)")
    sub.add_parser("schema", help="print the config JSON schema")
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "schema":
        print(json.dumps(json_schema(), indent=1, sort_keys=True))
        return EXIT_OK
    if args.threads is not None and args.threads < 1:
        _report("invalid-config", ["--threads: must be >= 1"])
        return EXIT_CONFIG
    try:
        cfg = load_config(args.config, None if args.command == "run" else args.command)
        if args.seed_override is not None:
            cfg = cfg.with_seed(args.seed_override)
    except ConfigError as exc:
        _report("invalid-config", exc.messages)
        return EXIT_CONFIG

    from .runner import run_experiment

    try:
        result = run_experiment(cfg, args.out, args.threads)
    except Exception as exc:  # any failure past validation is a runtime error
        _report("runtime-error", [f"{type(exc).__name__}: {exc}"])
        return EXIT_RUNTIME
    print(f"{cfg.experiment}: {result.summary}")
    for p in result.files:
        print(f"  wrote {p}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
