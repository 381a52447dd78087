#!/usr/bin/env python3
"""Distributed vs. centralized claim latency over claim sizes; writes speedup.csv."""

import sys

from tcpa.cli import main

if __name__ == "__main__":
    sys.exit(main(["speedup-bench", *sys.argv[1:]]))
