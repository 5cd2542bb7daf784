#!/usr/bin/env python3
"""Byte-level LM comparison: hybrid vs parameter-matched window-only and
SSM-only baselines on a local corpus; prints validation perplexities.

    python3 scripts/make_corpus.py --out corpus.txt
    python3 scripts/run_charlm.py --corpus corpus.txt --seeds 0,1,2
"""

import argparse
import dataclasses
import os

import numpy as np

from spade.model import ModelConfig, build_model
from spade.tasks import TaskSpec, make_task
from spade.training import TrainConfig, match_ffn_mult, train


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--corpus", default="corpus.txt")
    ap.add_argument("--out", default="runs/charlm")
    ap.add_argument("--seeds", default="0,1,2")
    ap.add_argument("--steps", type=int, default=1500)
    args = ap.parse_args()
    seeds = [int(s) for s in args.seeds.split(",")]

    spec = TaskSpec(kind="char_lm", length=256, vocab_size=256,
                    corpus_path=args.corpus)
    base = ModelConfig(vocab_size=256, d=32, depth=2, n_heads=2, d_s=64,
                       window_w=1, dropout=0.0, variant="spade",
                       ssm_trainable=True)
    target = build_model(base, seed=0).trainable_count()
    configs = {
        "spade": base,
        "window_only": match_ffn_mult(
            dataclasses.replace(base, variant="attn_only",
                                ssm_trainable=False), target),
        "ssm_only": match_ffn_mult(
            dataclasses.replace(base, variant="ssm_only",
                                ssm_trainable=False), target),
    }
    tc = TrainConfig(batch_size=8, total_steps=args.steps, warmup_steps=100,
                     eval_interval=max(500, args.steps // 3),
                     eval_samples=32, lr=1e-3, dropout=0.0)
    task = make_task(spec)
    for name, cfg in configs.items():
        ppls = []
        for seed in seeds:
            out_dir = os.path.join(args.out, f"{name}-seed{seed}")
            model = build_model(cfg, seed=seed)
            recs = train(model, task, dataclasses.replace(tc, seed=seed),
                         out_dir=out_dir)
            ppls.append(recs[-1].eval_metric)
            print(f"{name} seed={seed}: val ppl={ppls[-1]:.3f}")
        print(f"{name} mean val ppl: {np.mean(ppls):.3f}\n")


if __name__ == "__main__":
    main()
