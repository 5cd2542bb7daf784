"""Benchmark surface: length scaling, global-layer placement ablation,
and the window-size x sequence-length sweep.

Timings are steady-state forward+backward wall times (warmup reps absorb
the one-time kernel materialization of frozen SSMs); memory is the
tensor allocator's high-water mark, not OS RSS.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, replace

import numpy as np

from . import tensor as T
from .model import ModelConfig, build_model, model_forward
from .tasks import TaskSpec, make_task
from .tensor import backward
from .training import TrainConfig, evaluate, match_ffn_mult, train

VARIANTS = ("full", "window", "chunk", "spade_window", "spade_chunk", "ssm_only")


@dataclass
class ScalingRow:
    variant: str
    length: int
    seconds: float   # fastest rep; < 0 marks a failed (out-of-memory) cell
    peak_bytes: int
    reps: int

    @property
    def failed(self) -> bool:
        return self.seconds < 0


def variant_config(variant: str, d: int, depth: int, n_heads: int, d_s: int,
                   window_w: int, chunk_c: int, vocab: int) -> ModelConfig:
    base = dict(vocab_size=vocab, d=d, depth=depth, n_heads=n_heads, d_s=d_s,
                window_w=window_w, chunk_c=chunk_c, causal=True, dropout=0.0)
    if variant == "full":
        return ModelConfig(pattern_kind="full", variant="attn_only", **base)
    if variant == "window":
        return ModelConfig(pattern_kind="window", variant="attn_only", **base)
    if variant == "chunk":
        return ModelConfig(pattern_kind="chunk", variant="attn_only", **base)
    if variant == "spade_window":
        return ModelConfig(pattern_kind="window", variant="spade", **base)
    if variant == "spade_chunk":
        return ModelConfig(pattern_kind="chunk", variant="spade", **base)
    if variant == "ssm_only":
        return ModelConfig(pattern_kind="window", variant="ssm_only", **base)
    raise ValueError(f"unknown variant {variant!r}")


def _time_one(cfg: ModelConfig, L: int, seed: int, warmup: int, reps: int):
    model = build_model(cfg, seed)
    rng = np.random.default_rng(seed)
    tokens = rng.integers(0, cfg.vocab_size, size=L)
    targets = rng.integers(0, cfg.vocab_size, size=L)

    def one_pass():
        logits = model_forward(model, tokens, mode="lm")
        loss = T.cross_entropy(logits, targets)
        backward(loss)
        for _, p in model.trainable_parameters():
            p.grad = None

    for _ in range(warmup):
        one_pass()
    T.reset_peak_memory()
    times = []
    for _ in range(reps):
        t0 = time.perf_counter()
        one_pass()
        times.append(time.perf_counter() - t0)
    # min over reps: scheduler noise on a shared CPU is strictly additive,
    # so the fastest rep is the best estimate of intrinsic cost
    return float(np.min(times)), T.peak_memory_bytes()


def bench_scaling(variants, lengths, d: int = 32, depth: int = 2, n_heads: int = 1,
                  d_s: int = 32, window_w: int = 32, chunk_c: int = 32,
                  vocab: int = 64, reps: int = 5, warmup: int = 2, seed: int = 0,
                  out_dir: str | None = None):
    """Time forward+backward per (variant, length); fit log-log exponents.

    An out-of-memory length is recorded as a failure row and the sweep
    continues with the next variant/length.
    """
    if reps < 5:
        raise ValueError("need at least 5 timed reps")
    if list(lengths) != sorted(lengths):
        raise ValueError("lengths must be sorted ascending")
    rows: list[ScalingRow] = []
    for variant in variants:
        cfg = variant_config(variant, d, depth, n_heads, d_s, window_w, chunk_c, vocab)
        for L in lengths:
            try:
                mean_s, peak = _time_one(cfg, L, seed, warmup, reps)
                rows.append(ScalingRow(variant, L, mean_s, peak, reps))
            except MemoryError:
                rows.append(ScalingRow(variant, L, -1.0, 0, reps))
    exponents = fit_exponents(rows)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        write_scaling_csv(rows, os.path.join(out_dir, "scaling.csv"))
        with open(os.path.join(out_dir, "exponents.json"), "w") as fh:
            json.dump(exponents, fh, indent=2)
    return rows, exponents


def bench_paired(variant_a: str, variant_b: str, lengths, d: int = 32,
                 depth: int = 2, n_heads: int = 1, d_s: int = 32,
                 window_w: int = 32, chunk_c: int = 32, vocab: int = 64,
                 reps: int = 7, warmup: int = 2, seed: int = 0):
    """Per-length wall-time ratio variant_a / variant_b, with the two models
    timed in alternating reps so slow drift in machine load cancels out of
    the ratio. Returns {L: (seconds_a, seconds_b)} of fastest reps."""
    if reps < 5:
        raise ValueError("need at least 5 timed reps")
    cfg_a = variant_config(variant_a, d, depth, n_heads, d_s, window_w, chunk_c, vocab)
    cfg_b = variant_config(variant_b, d, depth, n_heads, d_s, window_w, chunk_c, vocab)
    out = {}
    for L in lengths:
        rng = np.random.default_rng(seed)
        tokens = rng.integers(0, vocab, size=L)
        targets = rng.integers(0, vocab, size=L)
        passes = []
        for cfg in (cfg_a, cfg_b):
            model = build_model(cfg, seed)

            def one_pass(model=model):
                logits = model_forward(model, tokens, mode="lm")
                loss = T.cross_entropy(logits, targets)
                backward(loss)
                for _, p in model.trainable_parameters():
                    p.grad = None
            passes.append(one_pass)
        for p in passes:
            for _ in range(warmup):
                p()
        times = ([], [])
        for _ in range(reps):
            for rec, p in zip(times, passes):
                t0 = time.perf_counter()
                p()
                rec.append(time.perf_counter() - t0)
        out[L] = (float(np.min(times[0])), float(np.min(times[1])))
    return out


def fit_exponents(rows) -> dict[str, float]:
    """Slope of log(time) vs log(L) per variant over its successful rows."""
    out = {}
    by_variant: dict[str, list[ScalingRow]] = {}
    for r in rows:
        if not r.failed:
            by_variant.setdefault(r.variant, []).append(r)
    for variant, vr in by_variant.items():
        if len(vr) >= 2:
            xs = np.log([r.length for r in vr])
            ys = np.log([r.seconds for r in vr])
            out[variant] = float(np.polyfit(xs, ys, 1)[0])
    return out


def write_scaling_csv(rows, path) -> None:
    with open(path, "w") as fh:
        fh.write("variant,length,seconds,peak_bytes,reps\n")
        for r in rows:
            fh.write(f"{r.variant},{r.length},{r.seconds!r},{r.peak_bytes},{r.reps}\n")


# ---------------------------------------------------------------------------
# placement ablation (bottom-k vs all vs top-1)


def ablate_placement(base_cfg: ModelConfig, task_spec: TaskSpec, train_cfg: TrainConfig,
                     placements=("bottom-1", "all", "top-1"), seeds=(0, 1, 2),
                     out_dir: str | None = None):
    """Train one model per (placement, seed) under a fixed budget; emit the
    final eval metric per placement."""
    results = []
    for placement in placements:
        metrics = []
        for seed in seeds:
            cfg = replace(base_cfg, placement=placement)
            model = build_model(cfg, seed)
            task = make_task(task_spec)
            recs = train(model, task, replace(train_cfg, seed=seed))
            metrics.append(recs[-1].eval_metric)
        results.append({"placement": placement,
                        "metric_mean": float(np.mean(metrics)),
                        "metrics": [float(m) for m in metrics]})
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "ablation.csv"), "w") as fh:
            fh.write("placement,metric_mean," +
                     ",".join(f"seed{s}" for s in seeds) + "\n")
            for row in results:
                fh.write(f"{row['placement']},{row['metric_mean']!r}," +
                         ",".join(repr(m) for m in row["metrics"]) + "\n")
    return results


# ---------------------------------------------------------------------------
# window-size x length sweep


def sweep_window_length(base_cfg: ModelConfig, task_spec: TaskSpec,
                        train_cfg: TrainConfig, windows, lengths,
                        seeds=(0, 1, 2), out_dir: str | None = None):
    """Grid-train the hybrid across (window, length); rows = window sizes,
    columns = sequence lengths, cell = mean final eval metric."""
    grid = {}
    for w in windows:
        for L in lengths:
            vals = []
            for seed in seeds:
                cfg = replace(base_cfg, window_w=w, pattern_kind="window")
                spec = replace(task_spec, length=L)
                model = build_model(cfg, seed)
                task = make_task(spec)
                recs = train(model, task, replace(train_cfg, seed=seed))
                vals.append(recs[-1].eval_metric)
            grid[(w, L)] = float(np.mean(vals))
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        write_sweep_csv(grid, windows, lengths, os.path.join(out_dir, "sweep.csv"))
    return grid


def write_sweep_csv(grid, windows, lengths, path) -> None:
    with open(path, "w") as fh:
        fh.write("window," + ",".join(str(L) for L in lengths) + "\n")
        for w in windows:
            fh.write(f"{w}," + ",".join(repr(grid[(w, L)]) for L in lengths) + "\n")


def read_sweep_csv(path):
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        lengths = [int(x) for x in header[1:]]
        grid = {}
        windows = []
        for line in fh:
            parts = line.strip().split(",")
            w = int(parts[0])
            windows.append(w)
            for L, val in zip(lengths, parts[1:]):
                grid[(w, L)] = float(val)
    return grid, windows, lengths
