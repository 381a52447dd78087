#!/usr/bin/env python3
"""Exhaustive single-fault sweep for every voting scheme plus the two-fault coverage study."""

import sys

from tcpa.cli import main

if __name__ == "__main__":
    sys.exit(main(["ft-run", *sys.argv[1:]]))
