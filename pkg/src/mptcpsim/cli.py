"""Command-line entry point: ``mptcpsim run|list-scenarios|plot``."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path
from typing import Optional, Sequence

from .errors import InvariantViolation
from .scenario import (
    BUILTINS, DESCRIPTIONS, InvalidConfig, MODES, emit_plot_script, load_config,
    run_scenario, write_outputs,
)

EXIT_OK, EXIT_CONFIG, EXIT_INVARIANT = 0, 1, 2


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mptcpsim", description="Deterministic MPTCP simulator.")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a scenario and write its trace and summary")
    run.add_argument("--scenario", required=True, help="built-in name or path to a JSON config")
    run.add_argument("--mss", type=int)
    run.add_argument("--seed", type=int)
    run.add_argument("--duration", type=float, help="simulated seconds to run for")
    run.add_argument("--mode", choices=sorted(MODES))
    run.add_argument("--out", required=True, type=Path, help="output directory")
    run.add_argument("--plot", action="store_true", help="also write a gnuplot script")

    sub.add_parser("list-scenarios", help="list built-in scenarios")

    plot = sub.add_parser("plot", help="print a gnuplot script for a trace CSV")
    plot.add_argument("trace", type=Path)
    plot.add_argument("-o", "--output", help="PNG path the script should write")
    return p


def _run(args: argparse.Namespace) -> int:
    try:
        cfg = load_config(args.scenario)
        if args.mss is not None:
            cfg.mss = args.mss
        if args.seed is not None:
            cfg.seed = args.seed
        if args.duration is not None:
            cfg.sim_duration = args.duration
        if args.mode is not None:
            cfg.mode = args.mode
        cfg.validate()
    except InvalidConfig as exc:
        print("invalid config:", file=sys.stderr)
        for field_name, msg in exc.errors:
            print(f"  {field_name}: {msg}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        result = run_scenario(cfg)
    except InvariantViolation as exc:
        print(f"internal invariant violated: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    paths = write_outputs(result, args.out, plot=args.plot)
    s = result.summary
    for t in s["transfers"]:
        done = f"completed at {t['completion_time']:.3f} s" if t["completed"] else "incomplete"
        print(f"{cfg.name}: {t['src']} -> {t['dst']} {t['bytes_delivered']} bytes, {done}; "
              f"retx={t['retransmissions']} timeouts={t['timeouts']} halvings={t['halvings']}")
    for kind, path in paths.items():
        print(f"  {kind}: {path}")
    return EXIT_OK


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = _parser().parse_args(argv)
    if args.command == "run":
        return _run(args)
    if args.command == "list-scenarios":
        for name in BUILTINS:
            print(f"{name:8s} {DESCRIPTIONS[name]}")
        return EXIT_OK
    sys.stdout.write(emit_plot_script(args.trace, output=args.output))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
