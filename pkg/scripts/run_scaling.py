#!/usr/bin/env python3
"""Length-scaling benchmark wrapper around the CLI bench subcommand.

    python3 scripts/run_scaling.py --out runs/scaling
"""

import argparse
import os
import sys

from spade.cli import main as cli_main

HERE = os.path.dirname(os.path.abspath(__file__))


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="runs/scaling")
    ap.add_argument("--lengths", default="512,1024,2048,4096,8192")
    args = ap.parse_args()
    cfg = os.path.join(HERE, "..", "configs", "bench.ini")
    sys.exit(cli_main(["bench", "--config", cfg, "--out", args.out,
                       "--set", f"bench.lengths={args.lengths}"]))


if __name__ == "__main__":
    main()
