"""Command-line interface.

    gradsim run <config.yaml> [--out DIR]
    gradsim preset <name> [--out DIR]
    gradsim compare <run_a> <run_b> <tolspec.yaml>
    gradsim list-presets

Exit codes: 0 the run/comparison passed, 1 a check or comparison failed,
2 bad configuration or usage.
"""
from __future__ import annotations

import argparse
import sys

from ..errors import ConfigError, DecodeError, GradsimError
from .config import load_config
from .metrics import format_summary
from .presets import PRESETS
from .runner import compare_runs, run_experiment


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gradsim",
                                     description="deterministic distributed-SGD simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run an experiment from a config file")
    p_run.add_argument("config")
    p_run.add_argument("--out", default=None, help="output directory")

    p_preset = sub.add_parser("preset", help="run a named preset")
    p_preset.add_argument("name")
    p_preset.add_argument("--out", default=None, help="output directory")

    p_cmp = sub.add_parser("compare", help="compare two runs' metrics")
    p_cmp.add_argument("run_a", help="run directory or metrics.csv")
    p_cmp.add_argument("run_b", help="run directory or metrics.csv")
    p_cmp.add_argument("tolspec", help="YAML mapping column -> relation")

    sub.add_parser("list-presets", help="list available presets")
    return parser


def _finish_run(result) -> int:
    sys.stdout.write(format_summary(result.summary))
    if result.out_dir:
        sys.stdout.write(f"wrote {result.out_dir}/metrics.csv, trace.log, summary.txt\n")
    return 0 if result.passed else 1


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code not in (0, None) else 0

    try:
        if args.command == "run":
            config = load_config(args.config)
            return _finish_run(run_experiment(config, out_dir=args.out))

        if args.command == "preset":
            preset = PRESETS.get(args.name)
            if preset is None:
                known = ", ".join(sorted(PRESETS))
                raise ConfigError("preset", f"unknown preset {args.name!r} "
                                            f"(known: {known})")
            return _finish_run(run_experiment(preset.config, out_dir=args.out))

        if args.command == "compare":
            report = compare_runs(args.run_a, args.run_b, args.tolspec)
            for column, res in report["columns"].items():
                verdict = "ok" if res["ok"] else f"FAIL at row {res['first_bad_row']}"
                sys.stdout.write(f"{column}: {res['relation']}: {verdict} "
                                 f"(worst {res['worst']!r})\n")
            sys.stdout.write(f"rows: {report['rows']}\n")
            sys.stdout.write(f"result: {'pass' if report['ok'] else 'fail'}\n")
            return 0 if report["ok"] else 1

        if args.command == "list-presets":
            width = max(len(name) for name in PRESETS)
            for name, preset in PRESETS.items():
                sys.stdout.write(f"{name:<{width}}  {preset.summary}\n")
            return 0
    except ConfigError as exc:
        sys.stderr.write(f"config error: {exc}\n")
        return 2
    except DecodeError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return 2
    except GradsimError as exc:
        sys.stderr.write(f"run failed: {exc}\n")
        return 1
    raise AssertionError(f"unhandled command {args.command!r}")


if __name__ == "__main__":
    sys.exit(main())
