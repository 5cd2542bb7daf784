"""Synthetic long-range tasks and a byte-level corpus pipeline.

Every sample is (tokens, targets, positions): next-token logits at the
listed positions are scored against the targets. The recall task puts
key-value pairs at the front, filler in the middle, and the query key at
the end, so the answer lives at least ``gap`` tokens before the query.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

FILLER = 0


@dataclass
class TaskSpec:
    kind: str                     # copy | long_range_recall | char_lm
    length: int
    vocab_size: int
    n_pairs: int = 1
    gap: int = 0
    corpus_path: str | None = None

    def __post_init__(self):
        if self.kind not in ("copy", "long_range_recall", "char_lm"):
            raise ValueError(f"unknown task kind {self.kind!r}")
        if self.kind == "long_range_recall":
            if self.gap + 2 * self.n_pairs + 1 > self.length:
                raise ValueError(
                    f"gap {self.gap} + 2*{self.n_pairs} pairs + query do not fit in L={self.length}")
            if self.vocab_size < 5:
                raise ValueError("recall task needs vocab >= 5 (filler + keys + values)")


@dataclass
class Sample:
    tokens: np.ndarray            # int [L]
    targets: np.ndarray           # int [n]
    positions: np.ndarray         # int [n]


class RecallTask:
    """k1 v1 ... km vm <filler...> query(k_j) -> v_j at the final position."""

    metric = "accuracy"

    def __init__(self, spec: TaskSpec):
        self.spec = spec
        usable = spec.vocab_size - 1
        self.n_keys = usable // 2
        self.n_values = usable - self.n_keys
        self.key_base = 1
        self.value_base = 1 + self.n_keys
        if self.n_keys < spec.n_pairs:
            raise ValueError("not enough key tokens for the requested pair count")

    @property
    def vocab_size(self) -> int:
        return self.spec.vocab_size

    def _one(self, rng: np.random.Generator) -> Sample:
        sp = self.spec
        L, m = sp.length, sp.n_pairs
        keys = rng.choice(self.n_keys, size=m, replace=False) + self.key_base
        values = rng.integers(0, self.n_values, size=m) + self.value_base
        tokens = np.full(L, FILLER, dtype=np.int64)
        tokens[0:2 * m:2] = keys
        tokens[1:2 * m + 1:2] = values
        j = int(rng.integers(m))
        tokens[L - 1] = keys[j]
        return Sample(tokens=tokens,
                      targets=np.array([values[j]], dtype=np.int64),
                      positions=np.array([L - 1], dtype=np.int64))

    def sample_batch(self, rng: np.random.Generator, n: int) -> list[Sample]:
        return [self._one(rng) for _ in range(n)]

    def eval_set(self, n: int, seed: int = 10_000) -> list[Sample]:
        rng = np.random.default_rng(seed)
        return [self._one(rng) for _ in range(n)]


def rescan_target(task: RecallTask, tokens: np.ndarray) -> int:
    """Independent re-derivation of a recall sample's answer: scan the
    prefix for the queried key and return the token after it."""
    query = tokens[-1]
    m = task.spec.n_pairs
    for pos in range(0, 2 * m, 2):
        if tokens[pos] == query:
            return int(tokens[pos + 1])
    raise ValueError("query key not present in the prefix")


class CopyTask:
    """Random prefix, delimiter, then the model must reproduce the prefix."""

    metric = "accuracy"

    def __init__(self, spec: TaskSpec):
        self.spec = spec
        self.n = (spec.length - 1) // 2

    @property
    def vocab_size(self) -> int:
        return self.spec.vocab_size

    def _one(self, rng: np.random.Generator) -> Sample:
        L, n = self.spec.length, self.n
        payload = rng.integers(1, self.spec.vocab_size, size=n)
        tokens = np.full(L, FILLER, dtype=np.int64)
        tokens[:n] = payload
        tokens[n] = FILLER  # delimiter
        tokens[n + 1:2 * n + 1] = payload
        positions = n + np.arange(n, dtype=np.int64)  # predicting the echo
        return Sample(tokens=tokens, targets=payload.astype(np.int64),
                      positions=positions)

    def sample_batch(self, rng, n):
        return [self._one(rng) for _ in range(n)]

    def eval_set(self, n: int, seed: int = 10_000):
        rng = np.random.default_rng(seed)
        return [self._one(rng) for _ in range(n)]


def load_char_corpus(path, ratios=(0.8, 0.1, 0.1), length: int = 256):
    """Byte-level corpus split into contiguous train/val/test regions, each
    cut into non-overlapping segments of length+1 bytes."""
    with open(path, "rb") as fh:
        data = np.frombuffer(fh.read(), dtype=np.uint8)
    if len(data) < 10 * length:
        raise ValueError(f"corpus too small: {len(data)} bytes < 10*L={10 * length}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError("split ratios must sum to 1")
    n = len(data)
    cut1 = int(n * ratios[0])
    cut2 = cut1 + int(n * ratios[1])
    splits = {}
    for name, lo, hi in (("train", 0, cut1), ("val", cut1, cut2), ("test", cut2, n)):
        region = data[lo:hi]
        count = len(region) // (length + 1)
        segs = region[:count * (length + 1)].reshape(count, length + 1)
        splits[name] = segs.astype(np.int64)
    return splits


class CharLMTask:
    """Next-byte prediction on fixed-length segments of a text file."""

    metric = "perplexity"

    def __init__(self, spec: TaskSpec):
        if not spec.corpus_path or not os.path.exists(spec.corpus_path):
            raise FileNotFoundError(f"corpus file not found: {spec.corpus_path}")
        self.spec = spec
        self.splits = load_char_corpus(spec.corpus_path, length=spec.length)

    @property
    def vocab_size(self) -> int:
        return 256

    @staticmethod
    def _to_sample(seg: np.ndarray) -> Sample:
        L = len(seg) - 1
        return Sample(tokens=seg[:L], targets=seg[1:],
                      positions=np.arange(L, dtype=np.int64))

    def sample_batch(self, rng: np.random.Generator, n: int) -> list[Sample]:
        idx = rng.integers(0, len(self.splits["train"]), size=n)
        return [self._to_sample(self.splits["train"][i]) for i in idx]

    def eval_set(self, n: int, seed: int = 0, split: str = "val") -> list[Sample]:
        segs = self.splits[split]
        return [self._to_sample(segs[i]) for i in range(min(n, len(segs)))]


def make_task(spec: TaskSpec):
    if spec.kind == "long_range_recall":
        return RecallTask(spec)
    if spec.kind == "copy":
        return CopyTask(spec)
    return CharLMTask(spec)
