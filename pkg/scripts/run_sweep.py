#!/usr/bin/env python3
"""Grouping and voting-scheme sweeps over the shipped workloads.

Writes grouping/sweep.csv and schemes/sweep.csv under the output directory
(default ./out). Extra arguments go to both sweeps, e.g. ``--workers 4``.
"""

import argparse
import sys
from pathlib import Path

from tcpa.cli import main


def parse_args(argv):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("-o", "--out", default="out")
    return p.parse_known_args(argv)


if __name__ == "__main__":
    args, rest = parse_args(sys.argv[1:])
    out = Path(args.out)
    rc = main(["sweep", "mixed_workload.toml", "-o", str(out / "grouping"),
               "--grid", 'power.ictrl_domain_size=[1, 4, "row", "array"]', *rest])
    rc = rc or main(["sweep", "ft_tmr.toml", "-o", str(out / "schemes"),
                     "--grid", 'events.*.scheme=["4a", "4b", "4c", "4d"]', *rest])
    sys.exit(rc)
