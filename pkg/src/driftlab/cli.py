"""Command-line interface.

    driftlab <front-sweep|gip-stats|couple|decouple|renorm|stats>
             --config FILE [--seed N] [--out DIR] [--acceptance]

The config file is the flat key-value format described in README.md; the
default output root comes from $DRIFTLAB_OUT (falling back to ./runs).
Heavy acceptance-scale configs refuse to run without --acceptance.
"""
from __future__ import annotations

import argparse
import sys

from . import harness


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="driftlab", description=__doc__,
                                 formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = ap.add_subparsers(dest="command", required=True)
    for name in harness.COMMANDS:
        sp = sub.add_parser(name, help=f"run a {name} experiment")
        sp.add_argument("--config", required=True, help="flat key=value config file")
        sp.add_argument("--seed", type=int, default=None, help="override config seed")
        sp.add_argument("--out", default=None, help="output root directory")
        sp.add_argument("--acceptance", action="store_true",
                        help="allow heavy acceptance-scale sweeps")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = harness.parse_config(args.config)
    except harness.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    if cfg["kind"] != args.command:
        print(f"config kind {cfg['kind']!r} does not match subcommand "
              f"{args.command!r}", file=sys.stderr)
        return 2
    if args.seed is not None:
        cfg["seed"] = args.seed
    try:
        path = harness.run_config(cfg, args.out, acceptance=args.acceptance)
    except harness.ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(path)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
