"""Adam trainer with linear warmup + inverse-sqrt decay, and evaluation.

Optimizer defaults follow the pre-training recipe this model family was
published with: betas (0.9, 0.98), eps 1e-6, clip 1.0, dropout 0.1,
weight decay 0.01. Batch size and step counts are desk-scale.
"""

from __future__ import annotations

import json
import math
import os
import time
from dataclasses import dataclass, field, asdict, replace

import numpy as np

from . import tensor as T
from .model import ModelConfig, SpadeModel, build_model, model_forward, save_checkpoint
from .tensor import Tensor, backward, no_grad


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, checkpoint: str | None):
        ref = checkpoint or "none saved"
        super().__init__(f"non-finite loss at step {step}; last good checkpoint: {ref}")
        self.step = step
        self.checkpoint = checkpoint


@dataclass
class TrainConfig:
    lr: float = 4e-4
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-6
    weight_decay: float = 0.01
    clip_norm: float = 1.0
    dropout: float = 0.1
    batch_size: int = 32
    total_steps: int = 1000
    warmup_steps: int = 100
    seed: int = 0
    precision: str = "float32"
    eval_interval: int = 200
    eval_samples: int = 64

    def __post_init__(self):
        for name in ("lr", "beta1", "beta2", "eps", "batch_size", "total_steps"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.warmup_steps > self.total_steps:
            raise ValueError("warmup_steps must not exceed total_steps")


@dataclass
class MetricsRecord:
    step: int
    train_loss: float
    eval_loss: float
    eval_metric: float
    seconds: float
    peak_bytes: int


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to the peak, then inverse-sqrt decay."""
    if cfg.warmup_steps == 0:
        return cfg.lr / math.sqrt(max(step, 1) / 1.0) if step > 1 else cfg.lr
    if step < cfg.warmup_steps:
        return cfg.lr * step / cfg.warmup_steps
    return cfg.lr * math.sqrt(cfg.warmup_steps / step)


class Adam:
    """Adam with decoupled weight decay and global-norm gradient clipping."""

    def __init__(self, params, cfg: TrainConfig):
        self.params = [t for _, t in params]
        self.cfg = cfg
        self.m = [np.zeros_like(t.data, dtype=np.float64) for t in self.params]
        self.v = [np.zeros_like(t.data, dtype=np.float64) for t in self.params]
        self.t = 0

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def clip_gradients(self) -> float:
        total = 0.0
        for p in self.params:
            if p.grad is not None:
                total += float((p.grad.astype(np.float64) ** 2).sum())
        norm = math.sqrt(total)
        clip = self.cfg.clip_norm
        if clip > 0 and norm > clip:
            factor = clip / (norm + 1e-12)
            for p in self.params:
                if p.grad is not None:
                    p.grad = p.grad * factor
        return norm

    def step(self, lr: float):
        self.t += 1
        c = self.cfg
        bc1 = 1.0 - c.beta1 ** self.t
        bc2 = 1.0 - c.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad.astype(np.float64)
            m *= c.beta1
            m += (1 - c.beta1) * g
            v *= c.beta2
            v += (1 - c.beta2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + c.eps)
            if c.weight_decay > 0:
                update = update + c.weight_decay * p.data.astype(np.float64)
            p.data = (p.data.astype(np.float64) - lr * update).astype(p.data.dtype)


def _sample_loss(model: SpadeModel, sample, train: bool, rng) -> tuple:
    logits = model_forward(model, sample.tokens, mode="lm", train=train, rng=rng)
    sel = T.gather_rows(logits, sample.positions)
    loss = T.cross_entropy(sel, sample.targets)
    correct = int((sel.data.argmax(axis=1) == sample.targets).sum())
    return loss, correct, len(sample.targets)


def evaluate(model: SpadeModel, task, n_samples: int = 64, split: str = "val"):
    """(mean loss, metric). Metric is accuracy or perplexity per the task."""
    if task.metric == "perplexity":
        samples = task.eval_set(n_samples, split=split)
    else:
        samples = task.eval_set(n_samples)
    if not samples:
        raise ValueError("empty eval set")
    total_loss = 0.0
    total_tok = 0
    total_correct = 0
    with no_grad():
        for s in samples:
            loss, correct, ntok = _sample_loss(model, s, train=False, rng=None)
            total_loss += loss.item() * ntok
            total_correct += correct
            total_tok += ntok
    mean_loss = total_loss / total_tok
    if task.metric == "accuracy":
        return mean_loss, total_correct / total_tok
    return mean_loss, math.exp(mean_loss)


def train(model: SpadeModel, task, cfg: TrainConfig, out_dir: str | None = None,
          checkpoint_every: int = 0):
    """Run the optimization loop; returns the list of MetricsRecords.

    Deterministic given the seed (single-threaded). Metrics are mirrored
    to metrics.csv / metrics.jsonl when out_dir is given.
    """
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(model.trainable_parameters(), cfg)
    records: list[MetricsRecord] = []
    ckpt_path = None
    t0 = time.perf_counter()
    T.reset_peak_memory()
    for step in range(cfg.total_steps):
        batch = task.sample_batch(rng, cfg.batch_size)
        opt.zero_grad()
        train_loss = 0.0
        for s in batch:
            loss, _, _ = _sample_loss(model, s, train=True, rng=rng)
            train_loss += loss.item() / len(batch)
            backward(T.scale(loss, 1.0 / len(batch)))
        if not math.isfinite(train_loss):
            raise TrainingDiverged(step, ckpt_path)
        opt.clip_gradients()
        opt.step(lr_at(step, cfg))
        for m in model.ssm_modules():
            if m.trainable:
                m.invalidate_cache()
        if checkpoint_every and out_dir and (step + 1) % checkpoint_every == 0:
            ckpt_path = os.path.join(out_dir, "checkpoint.spade")
            save_checkpoint(model, ckpt_path)
        if (step + 1) % cfg.eval_interval == 0 or step + 1 == cfg.total_steps:
            eval_loss, metric = evaluate(model, task, cfg.eval_samples)
            records.append(MetricsRecord(
                step=step + 1, train_loss=train_loss, eval_loss=eval_loss,
                eval_metric=metric, seconds=time.perf_counter() - t0,
                peak_bytes=T.peak_memory_bytes()))
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        write_metrics(records, out_dir)
        save_checkpoint(model, os.path.join(out_dir, "checkpoint.spade"))
    return records


def write_metrics(records, out_dir: str) -> None:
    with open(os.path.join(out_dir, "metrics.csv"), "w") as fh:
        fh.write("step,train_loss,eval_loss,eval_metric,seconds,peak_bytes\n")
        for r in records:
            fh.write(f"{r.step},{r.train_loss!r},{r.eval_loss!r},"
                     f"{r.eval_metric!r},{r.seconds!r},{r.peak_bytes}\n")
    with open(os.path.join(out_dir, "metrics.jsonl"), "w") as fh:
        for r in records:
            fh.write(json.dumps(asdict(r)) + "\n")


def match_ffn_mult(cfg: ModelConfig, target_trainable: int, seed: int = 0,
                   tol: float = 0.05) -> ModelConfig:
    """Widen the FFN of ``cfg`` until its trainable-parameter count lands
    within ``tol`` of the target (matched-capacity baselines)."""
    def count(mult: float) -> int:
        return build_model(replace(cfg, ffn_mult=mult), seed).trainable_count()

    lo, hi = cfg.ffn_mult, cfg.ffn_mult
    while count(hi) < target_trainable and hi < 512:
        lo, hi = hi, hi * 2
    for _ in range(40):
        mid = 0.5 * (lo + hi)
        if count(mid) < target_trainable:
            lo = mid
        else:
            hi = mid
        if abs(count(mid) - target_trainable) / target_trainable <= tol / 4:
            return replace(cfg, ffn_mult=mid)
    return replace(cfg, ffn_mult=hi)
