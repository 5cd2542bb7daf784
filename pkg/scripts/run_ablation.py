#!/usr/bin/env python3
"""Global-layer placement ablation (bottom-1 vs all vs top-1) on the
long-range recall task.

    python3 scripts/run_ablation.py --out runs/ablation
"""

import argparse
import sys

from spade.cli import main as cli_main


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="runs/ablation")
    ap.add_argument("--seeds", default="0,1,2")
    args = ap.parse_args()
    sys.exit(cli_main([
        "ablate", "--out", args.out,
        "--set", "model.vocab_size=33", "--set", "model.d=32",
        "--set", "model.depth=2", "--set", "model.n_heads=2",
        "--set", "model.d_s=64", "--set", "model.window_w=4",
        "--set", "model.dropout=0.0",
        "--set", "task.length=128", "--set", "task.gap=96",
        "--set", "train.lr=3e-3", "--set", "train.batch_size=8",
        "--set", "train.total_steps=3000", "--set", "train.warmup_steps=100",
        "--set", "train.eval_interval=1500", "--set", "train.eval_samples=64",
        "--set", "train.dropout=0.0",
        "--set", f"bench.seeds={args.seeds}",
    ]))


if __name__ == "__main__":
    main()
