"""Command-line entry point: ``etds --scenario FILE --out DIR`` or ``etds --scenario FILE --sweep GRID``."""

from __future__ import annotations

import argparse
import logging
import sys

from .errors import ScenarioError
from .pipeline import EXIT_INPUT, run, sweep


def _u64(s):
    v = int(s)
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def build_parser():
    p = argparse.ArgumentParser(
        prog="etds",
        description="Simulate and certify event-triggered distributed stabilization under DoS.")
    p.add_argument("--scenario", required=True, metavar="PATH", help="scenario file (etds-scenario/1)")
    p.add_argument("--out", default="out", metavar="DIR", help="output directory (default: out)")
    p.add_argument("--seed", type=_u64, metavar="U64", help="seed for DoS schedule generation")
    p.add_argument("--dt", type=float, metavar="F64", help="override the integration step")
    p.add_argument("--no-dos", action="store_true", help="strip the attack schedule")
    p.add_argument("--sweep", metavar="GRIDFILE", help="run a parameter grid over the scenario")
    p.add_argument("--jobs", type=int, default=1, help="parallel sweep workers (default: 1)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    flags = {"seed": args.seed, "dt": args.dt, "no_dos": args.no_dos}
    if args.sweep:
        try:
            code, rows = sweep(args.scenario, args.sweep, args.out, jobs=args.jobs, **flags)
        except (OSError, ScenarioError) as exc:
            logging.getLogger("etds").error("%s", exc)
            return EXIT_INPUT
        print(f"{len(rows)} points, aggregate written to {args.out}/aggregate.csv")
        return code
    code = run(args.scenario, args.out, **flags)
    print(f"exit {code}, outputs in {args.out}")
    return code


if __name__ == "__main__":
    sys.exit(main())
