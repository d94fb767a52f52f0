"""Command-line entry point for simulation campaigns."""

import argparse
import logging
import sys

from gfcf.campaign import run_campaign
from gfcf.config import ALGORITHMS, DEFAULT_CONFIG_TEXT, RunConfig, load_config
from gfcf.exceptions import ContractViolation


def build_parser():
    p = argparse.ArgumentParser(
        prog="gfcf",
        description="Grant-free cell-free uplink receiver campaigns.",
    )
    p.add_argument("--config", help="YAML config file (see --print-config)")
    p.add_argument("--seed", type=int, help="master seed (unsigned 64-bit)")
    p.add_argument("--setups", type=int, help="user position setups")
    p.add_argument("--trials", type=int, help="draws per setup")
    p.add_argument("--algo", action="append", choices=ALGORITHMS,
                   help="receiver to run; repeat for several (default from config)")
    p.add_argument("--out", default="results", help="output directory (default: results)")
    p.add_argument("--threads", type=int, help="worker threads")
    p.add_argument("--verbose", action="store_true", help="per-trial and per-sweep log lines")
    p.add_argument("--print-config", action="store_true", help="print the default config and exit")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    if args.print_config:
        sys.stdout.write(DEFAULT_CONFIG_TEXT)
        return 0
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = load_config(args.config) if args.config else RunConfig()
        cfg = cfg.with_overrides(
            seed=args.seed,
            setups=args.setups,
            trials=args.trials,
            algos=tuple(args.algo) if args.algo else None,
            threads=args.threads,
        )
    except (ContractViolation, OSError, TypeError) as exc:
        print(f"gfcf: error: {exc}", file=sys.stderr)
        return 2
    result = run_campaign(cfg, args.out, verbose=args.verbose)
    n_bad = sum(1 for r in result.records if r.status.startswith("error"))
    print(f"wrote {len(result.records)} records to {args.out}" + (f" ({n_bad} failed)" if n_bad else ""))
    return 0


if __name__ == "__main__":
    sys.exit(main())
