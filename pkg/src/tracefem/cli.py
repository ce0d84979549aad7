"""Command line front end: ``tracefem <study> [flags]``."""
from __future__ import annotations

import argparse
import sys

from .studies import STUDY_KINDS, ConfigError, parse_config, run_study


def build_parser():
    p = argparse.ArgumentParser(prog="tracefem", description="Trace finite element studies on implicit surfaces.")
    p.add_argument("study", choices=STUDY_KINDS)
    p.add_argument("--config", metavar="PATH", help="key=value config file")
    p.add_argument("--out", metavar="DIR")
    p.add_argument("--seed", type=int)
    p.add_argument("--surface", metavar="NAME")
    p.add_argument("--m", type=int, metavar="D", help="FE degree")
    p.add_argument("--k", type=int, metavar="D", help="geometry degree")
    p.add_argument("--stab", metavar="KIND")
    p.add_argument("--rho", type=float, metavar="X")
    p.add_argument("--levels", type=int, metavar="N")
    p.add_argument("--theta", type=float, metavar="X")
    p.add_argument("--eps", type=float, metavar="X")
    p.add_argument("--n0", type=int, metavar="N", help="subdivisions of the coarsest mesh")
    p.add_argument("--timings", action="store_true", default=None, help="write timing columns to report.csv")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    overrides = {k: v for k, v in vars(args).items() if k != "config"}
    try:
        cfg = parse_config(args.config, overrides)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    report = run_study(cfg)
    for r in report.records:
        status = f"FAILED ({r.failed})" if r.failed else f"h={r.h:.4g} n_active={r.n_active}"
        print(f"level {r.level}: {status}")
    for name, ok in report.flags.items():
        print(f"{'PASS' if ok else 'FAIL'} {name}")
    print(f"wrote {cfg.out}/report.csv and {cfg.out}/summary.txt")
    return 0 if report.passed else 1


if __name__ == "__main__":
    sys.exit(main())
