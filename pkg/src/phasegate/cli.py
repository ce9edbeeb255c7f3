"""Command-line front end for the sweeps and reports.

One executable, four subcommands. Tables go to stdout unless ``--out``
redirects them to a file; progress notes go to stderr so piping the CSV
stays clean. Exit status is 0 on success, 1 when a check fails or a sweep
point does not converge, and 2 for anything wrong with the invocation
itself.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path
from typing import Sequence

from .experiments import (
    ConfigError,
    SweepConfig,
    config_from_items,
    parse_config_text,
    run_fig4,
    run_fig5,
    run_gate_check,
    run_validate,
)

__all__ = ["main", "build_parser"]

_RUNNERS = {
    "fig4": run_fig4,
    "fig5": run_fig5,
    "gate-check": run_gate_check,
    "validate": run_validate,
}

_DESCRIPTIONS = {
    "fig4": "sweep deviated-gate fidelity over the written phase",
    "fig5": "sweep full lossy-run fidelity over the detuning ratio",
    "gate-check": "replay the sequence on every basis state against the exact gate",
    "validate": "run the numerical invariant checks and report pass/fail",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="phasegate",
        description="controlled-phase gate simulator: sweeps and checks",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in _DESCRIPTIONS.items():
        cmd = sub.add_parser(name, help=help_text)
        cmd.add_argument(
            "--config", metavar="PATH", help="flat key=value config file"
        )
        cmd.add_argument(
            "--out", metavar="PATH", help="write the result here instead of stdout"
        )
        cmd.add_argument(
            "--set",
            metavar="KEY=VALUE",
            action="append",
            default=[],
            dest="overrides",
            help="override one config key (repeatable)",
        )
        cmd.add_argument(
            "--quiet", action="store_true", help="suppress progress output"
        )
    return parser


def _gather_config(args: argparse.Namespace) -> SweepConfig:
    items: dict[str, str] = {}
    if args.config is not None:
        items.update(parse_config_text(Path(args.config).read_text()))
    for override in args.overrides:
        if "=" not in override:
            raise ConfigError(f"--set expects KEY=VALUE, got {override!r}")
        key, value = override.split("=", 1)
        items[key.strip()] = value.strip()
    if args.out is not None:
        items["output"] = args.out
    return config_from_items(args.command, items)


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    progress = None if args.quiet else lambda msg: print(msg, file=sys.stderr)
    try:
        cfg = _gather_config(args)
        result = _RUNNERS[args.command](cfg, progress=progress)
    except (ConfigError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2

    if args.command in ("fig4", "fig5"):
        if cfg.output is None:
            sys.stdout.write(result.to_csv())
        if result.flagged:
            points = ", ".join(f"{b:g}" for b in result.flagged)
            print(f"non-converged points: b = {points}", file=sys.stderr)
            return 1
        return 0

    if cfg.output is None:
        sys.stdout.write(result.text())
    return 0 if result.ok else 1
