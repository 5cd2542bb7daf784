"""Full softmax attention and its local sparsifications (window, chunk).

``masked_attention`` is the semantic reference: full attention plus an
additive -inf mask. The window and chunk fast paths never build an LxL
score matrix and must agree with the reference to 1e-5; tests hold them
to that.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass
class AttentionParams:
    W_q: Tensor
    W_k: Tensor
    W_v: Tensor
    W_o: Tensor
    n_heads: int

    def __post_init__(self):
        d = self.W_q.shape[0]
        if d % self.n_heads != 0:
            raise ValueError(f"n_heads {self.n_heads} must divide d {d}")

    @property
    def d(self) -> int:
        return self.W_q.shape[0]

    @property
    def d_head(self) -> int:
        return self.d // self.n_heads


def init_attention(d: int, n_heads: int, rng: np.random.Generator,
                   dtype=None, requires_grad: bool = True) -> AttentionParams:
    dtype = dtype or T.DEFAULT_DTYPE
    std = 1.0 / math.sqrt(d)
    def w():
        return Tensor((rng.standard_normal((d, d)) * std).astype(dtype),
                      requires_grad=requires_grad)
    return AttentionParams(W_q=w(), W_k=w(), W_v=w(), W_o=w(), n_heads=n_heads)


@dataclass
class LocalityPattern:
    kind: str                 # full | window | chunk
    window_w: int = 0
    chunk_c: int = 0
    causal: bool = False

    def __post_init__(self):
        if self.kind not in ("full", "window", "chunk"):
            raise ValueError(f"unknown locality kind {self.kind!r}")
        if self.kind == "window" and self.window_w < 1:
            raise ValueError("window_w must be >= 1")
        if self.kind == "chunk" and self.chunk_c < 1:
            raise ValueError("chunk_c must be >= 1")

    def mask(self, L: int) -> np.ndarray:
        """Boolean LxL mask; True where position i may attend to j."""
        i = np.arange(L)[:, None]
        j = np.arange(L)[None, :]
        if self.kind == "full":
            m = np.ones((L, L), dtype=bool)
        elif self.kind == "window":
            m = np.abs(i - j) <= self.window_w
        else:
            m = (i // self.chunk_c) == (j // self.chunk_c)
        if self.causal:
            m &= j <= i
        return m


def _additive(mask_bool: np.ndarray) -> np.ndarray:
    add = np.zeros(mask_bool.shape)
    add[~mask_bool] = -np.inf
    return add


def _causal_additive(L: int) -> np.ndarray:
    return _additive(np.tril(np.ones((L, L), dtype=bool)))


def _heads(X: Tensor, p: AttentionParams):
    """Per-head (Q, K, V) column slices of the shared projections."""
    Q = T.matmul(X, p.W_q)
    K = T.matmul(X, p.W_k)
    V = T.matmul(X, p.W_v)
    dh = p.d_head
    for h in range(p.n_heads):
        lo, hi = h * dh, (h + 1) * dh
        yield (T.slice_cols(Q, lo, hi), T.slice_cols(K, lo, hi),
               T.slice_cols(V, lo, hi))


def _combine_heads(outs, p: AttentionParams) -> Tensor:
    merged = outs[0]
    for o in outs[1:]:
        merged = T.concat_cols(merged, o)
    return T.matmul(merged, p.W_o)


def _attend_dense(Qh, Kh, Vh, add_mask, scale_div):
    S = T.matmul(T.scale(Qh, 1.0 / scale_div), T.transpose(Kh))
    P = T.softmax_rows(S, mask=add_mask)
    return T.matmul(P, Vh)


def full_attention(X: Tensor, p: AttentionParams, causal: bool = False) -> Tensor:
    """Multi-head softmax attention over the whole sequence; scores are
    scaled by sqrt(d_head) per head."""
    L = X.shape[0]
    add = _causal_additive(L) if causal else None
    scale = math.sqrt(p.d_head)
    outs = [_attend_dense(Qh, Kh, Vh, add, scale) for Qh, Kh, Vh in _heads(X, p)]
    return _combine_heads(outs, p)


def masked_attention(X: Tensor, p: AttentionParams, pattern: LocalityPattern) -> Tensor:
    """Reference local attention: full attention under an additive -inf
    mask induced by the locality pattern."""
    L = X.shape[0]
    add = _additive(pattern.mask(L))
    scale = math.sqrt(p.d_head)
    outs = [_attend_dense(Qh, Kh, Vh, add, scale) for Qh, Kh, Vh in _heads(X, p)]
    return _combine_heads(outs, p)


def _band_ranges(L: int, offsets):
    """Per-offset slice bounds so that i and i+o both stay in [0, L);
    offsets whose band is empty (|o| >= L) are dropped."""
    ranges = [(max(0, -o), min(L, L - o), o) for o in offsets]
    return [(lo, hi, o) for lo, hi, o in ranges if hi > lo]


def _window_core(Qh: Tensor, Kh: Tensor, Vh: Tensor, w: int, causal: bool,
                 scale_div: float) -> Tensor:
    """Banded attention for one head: O(L*w) scores, hand-written backward.

    Each band offset is handled with shifted slices, so no LxL (or even
    gathered L x W x d) array is ever built.
    """
    L, dh = Qh.shape
    offsets = range(-w, 1 if causal else w + 1)
    ranges = _band_ranges(L, offsets)
    q, k, v = Qh.data, Kh.data, Vh.data
    W = len(ranges)
    S = np.full((L, W), -np.inf, dtype=q.dtype)
    for col, (lo, hi, o) in enumerate(ranges):
        S[lo:hi, col] = np.einsum("ld,ld->l", q[lo:hi], k[lo + o:hi + o]) / scale_div
    Smax = S.max(axis=1, keepdims=True)
    E = np.exp(S - Smax)
    P = E / E.sum(axis=1, keepdims=True)
    O = np.zeros((L, dh), dtype=q.dtype)
    for col, (lo, hi, o) in enumerate(ranges):
        O[lo:hi] += P[lo:hi, col, None] * v[lo + o:hi + o]

    def bwd(g):
        dP = np.zeros_like(P)
        for col, (lo, hi, o) in enumerate(ranges):
            dP[lo:hi, col] = np.einsum("ld,ld->l", g[lo:hi], v[lo + o:hi + o])
        dS = P * (dP - (dP * P).sum(axis=1, keepdims=True))
        dS /= scale_div
        dQ = np.zeros_like(q)
        dK = np.zeros_like(k)
        dV = np.zeros_like(v)
        for col, (lo, hi, o) in enumerate(ranges):
            dQ[lo:hi] += dS[lo:hi, col, None] * k[lo + o:hi + o]
            dK[lo + o:hi + o] += dS[lo:hi, col, None] * q[lo:hi]
            dV[lo + o:hi + o] += P[lo:hi, col, None] * g[lo:hi]
        return (dQ, dK, dV)
    return T.custom_op(O, (Qh, Kh, Vh), bwd)


def window_attention_fast(X: Tensor, p: AttentionParams, w: int,
                          causal: bool = False) -> Tensor:
    """Banded window attention; score memory O(L*w) instead of O(L^2)."""
    if w < 1:
        raise ValueError("window size must be >= 1")
    scale = math.sqrt(p.d_head)
    outs = [_window_core(Qh, Kh, Vh, w, causal, scale)
            for Qh, Kh, Vh in _heads(X, p)]
    return _combine_heads(outs, p)


def chunk_attention_fast(X: Tensor, p: AttentionParams, c: int,
                         causal: bool = False) -> Tensor:
    """Block-diagonal attention over contiguous chunks; a short final
    chunk is kept ragged rather than padded."""
    if c < 1:
        raise ValueError("chunk size must be >= 1")
    L = X.shape[0]
    scale = math.sqrt(p.d_head)
    head_outs = []
    for Qh, Kh, Vh in _heads(X, p):
        pieces = []
        for start in range(0, L, c):
            stop = min(start + c, L)
            q = T.slice_rows(Qh, start, stop)
            k = T.slice_rows(Kh, start, stop)
            v = T.slice_rows(Vh, start, stop)
            add = _causal_additive(stop - start) if causal else None
            pieces.append(_attend_dense(q, k, v, add, scale))
        out = pieces[0]
        if len(pieces) > 1:
            rows = np.concatenate([pc.data for pc in pieces], axis=0)
            parents = tuple(pieces)
            bounds = np.cumsum([0] + [pc.shape[0] for pc in pieces])

            def bwd(g, bounds=bounds, n=len(pieces)):
                return tuple(g[bounds[i]:bounds[i + 1]] for i in range(n))
            out = T.custom_op(rows, parents, bwd)
        head_outs.append(out)
    return _combine_heads(head_outs, p)


def local_attention(X: Tensor, p: AttentionParams, pattern: LocalityPattern) -> Tensor:
    """Dispatch to the fast path matching the locality pattern."""
    if pattern.kind == "full":
        return full_attention(X, p, causal=pattern.causal)
    if pattern.kind == "window":
        return window_attention_fast(X, p, pattern.window_w, causal=pattern.causal)
    return chunk_attention_fast(X, p, pattern.chunk_c, causal=pattern.causal)
