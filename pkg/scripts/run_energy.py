#!/usr/bin/env python3
"""Power-gating savings, analytic-model error and the domain-grouping trade-off."""

import sys

from tcpa.cli import main

if __name__ == "__main__":
    sys.exit(main(["energy-bench", *sys.argv[1:]]))
