"""Attention tests: locality masks, fast-path equivalence against the
masked dense reference, degenerate reductions, causality, and gradients."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spade import tensor as T
from spade.attention import (
    AttentionParams,
    LocalityPattern,
    chunk_attention_fast,
    full_attention,
    init_attention,
    local_attention,
    masked_attention,
    window_attention_fast,
)
from spade.tensor import Tensor

from conftest import check_gradients


def make_params(d=8, n_heads=2, seed=0, dtype=np.float64, requires_grad=True):
    return init_attention(d, n_heads, np.random.default_rng(seed),
                          dtype=dtype, requires_grad=requires_grad)


def make_x(L, d=8, seed=1, dtype=np.float64, requires_grad=False):
    rng = np.random.default_rng(seed)
    return Tensor(rng.standard_normal((L, d)).astype(dtype),
                  requires_grad=requires_grad)


class TestLocalityPattern:
    def test_window_mask_band(self):
        m = LocalityPattern("window", window_w=2).mask(6)
        i, j = np.meshgrid(np.arange(6), np.arange(6), indexing="ij")
        assert np.array_equal(m, np.abs(i - j) <= 2)

    def test_chunk_mask_block_diagonal(self):
        m = LocalityPattern("chunk", chunk_c=3).mask(8)
        # Final ragged chunk has 2 positions.
        assert m[0, 2] and not m[0, 3]
        assert m[6, 7] and not m[6, 5]
        blocks = [m[0:3, 0:3], m[3:6, 3:6], m[6:8, 6:8]]
        assert all(b.all() for b in blocks)
        assert m.sum() == 9 + 9 + 4

    def test_causal_intersection(self):
        m = LocalityPattern("window", window_w=2, causal=True).mask(5)
        assert not m[1, 2]  # future masked out
        assert m[2, 1] and m[2, 0]
        assert not m[3, 0]  # outside the band

    def test_full_causal_is_lower_triangular(self):
        m = LocalityPattern("full", causal=True).mask(7)
        assert np.array_equal(m, np.tril(np.ones((7, 7), dtype=bool)))

    def test_rejects_bad_kind_and_sizes(self):
        with pytest.raises(ValueError):
            LocalityPattern("banded")
        with pytest.raises(ValueError):
            LocalityPattern("window", window_w=0)
        with pytest.raises(ValueError):
            LocalityPattern("chunk", chunk_c=0)

    def test_heads_must_divide(self):
        with pytest.raises(ValueError):
            make_params(d=8, n_heads=3)


class TestFullAttention:
    def test_single_head_matches_hand_rolled(self):
        # Oracle: the textbook formula written directly in numpy.
        p = make_params(d=4, n_heads=1)
        X = make_x(6, d=4)
        Q = X.data @ p.W_q.data
        K = X.data @ p.W_k.data
        V = X.data @ p.W_v.data
        S = Q @ K.T / math.sqrt(4)
        E = np.exp(S - S.max(axis=1, keepdims=True))
        P_ = E / E.sum(axis=1, keepdims=True)
        expect = (P_ @ V) @ p.W_o.data
        assert np.allclose(full_attention(X, p).data, expect, atol=1e-12)

    def test_multi_head_scaling_uses_head_dim(self):
        # With 2 heads of width 2, scores divide by sqrt(2), not sqrt(4).
        p = make_params(d=4, n_heads=2)
        X = make_x(5, d=4)
        dh = 2
        pieces = []
        for h in range(2):
            lo, hi = h * dh, (h + 1) * dh
            Q = (X.data @ p.W_q.data)[:, lo:hi]
            K = (X.data @ p.W_k.data)[:, lo:hi]
            V = (X.data @ p.W_v.data)[:, lo:hi]
            S = Q @ K.T / math.sqrt(dh)
            E = np.exp(S - S.max(axis=1, keepdims=True))
            pieces.append((E / E.sum(axis=1, keepdims=True)) @ V)
        expect = np.concatenate(pieces, axis=1) @ p.W_o.data
        assert np.allclose(full_attention(X, p).data, expect, atol=1e-12)

    def test_causal_first_row_is_self_only(self):
        p = make_params(d=4, n_heads=1)
        X = make_x(6, d=4)
        Y = full_attention(X, p, causal=True).data
        V = X.data @ p.W_v.data
        assert np.allclose(Y[0], V[0] @ p.W_o.data, atol=1e-12)

    def test_permutation_equivariance_non_causal(self):
        # No positional signal: permuting rows permutes outputs.
        p = make_params()
        X = make_x(7)
        perm = np.random.default_rng(0).permutation(7)
        Y = full_attention(X, p).data
        Yp = full_attention(Tensor(X.data[perm]), p).data
        assert np.allclose(Yp, Y[perm], atol=1e-10)


class TestFastPathEquivalence:
    @pytest.mark.parametrize("L,w", [(16, 2), (16, 4), (33, 5), (8, 20)])
    @pytest.mark.parametrize("causal", [False, True])
    def test_window_matches_masked_reference(self, L, w, causal):
        p = make_params()
        X = make_x(L, seed=L + w)
        pat = LocalityPattern("window", window_w=w, causal=causal)
        ref = masked_attention(X, p, pat).data
        fast = window_attention_fast(X, p, w, causal=causal).data
        assert np.max(np.abs(ref - fast)) < 1e-5

    @pytest.mark.parametrize("L,c", [(16, 4), (17, 4), (10, 3), (5, 8)])
    @pytest.mark.parametrize("causal", [False, True])
    def test_chunk_matches_masked_reference(self, L, c, causal):
        p = make_params()
        X = make_x(L, seed=L + c)
        pat = LocalityPattern("chunk", chunk_c=c, causal=causal)
        ref = masked_attention(X, p, pat).data
        fast = chunk_attention_fast(X, p, c, causal=causal).data
        assert np.max(np.abs(ref - fast)) < 1e-5

    def test_window_covering_sequence_is_full(self):
        # Degenerate: w >= L-1 must reproduce dense attention.
        p = make_params()
        X = make_x(12)
        full = full_attention(X, p).data
        fast = window_attention_fast(X, p, 11).data
        assert np.max(np.abs(full - fast)) < 1e-6

    def test_single_chunk_is_full(self):
        p = make_params()
        X = make_x(9)
        full = full_attention(X, p, causal=True).data
        fast = chunk_attention_fast(X, p, 9, causal=True).data
        assert np.max(np.abs(full - fast)) < 1e-6

    def test_chunk_one_is_identity_values(self):
        # c == 1: every position attends only to itself.
        p = make_params()
        X = make_x(6)
        Y = chunk_attention_fast(X, p, 1).data
        expect = (X.data @ p.W_v.data) @ p.W_o.data
        assert np.allclose(Y, expect, atol=1e-10)

    def test_dispatcher_routes_all_kinds(self):
        p = make_params()
        X = make_x(10)
        for pat, direct in [
            (LocalityPattern("full", causal=True),
             full_attention(X, p, causal=True)),
            (LocalityPattern("window", window_w=3, causal=True),
             window_attention_fast(X, p, 3, causal=True)),
            (LocalityPattern("chunk", chunk_c=4, causal=True),
             chunk_attention_fast(X, p, 4, causal=True)),
        ]:
            assert np.array_equal(local_attention(X, p, pat).data, direct.data)

    @given(L=st.integers(2, 24), w=st.integers(1, 25), seed=st.integers(0, 100))
    @settings(max_examples=25, deadline=None)
    def test_window_equivalence_property(self, L, w, seed):
        p = make_params(seed=seed)
        X = make_x(L, seed=seed + 1)
        pat = LocalityPattern("window", window_w=w, causal=True)
        ref = masked_attention(X, p, pat).data
        fast = window_attention_fast(X, p, w, causal=True).data
        assert np.max(np.abs(ref - fast)) < 1e-5


class TestCausality:
    @pytest.mark.parametrize("kind,kw", [
        ("full", {}),
        ("window", {"window_w": 3}),
        ("chunk", {"chunk_c": 4}),
    ])
    def test_future_perturbation_invisible(self, kind, kw):
        p = make_params()
        pat = LocalityPattern(kind, causal=True, **kw)
        X = make_x(14)
        X2 = Tensor(X.data.copy())
        X2.data[9:] += 5.0
        Y = local_attention(X, p, pat).data
        Y2 = local_attention(X2, p, pat).data
        assert np.array_equal(Y[:9], Y2[:9])


class TestGradients:
    def test_full_attention_gradients(self):
        X = make_x(6, requires_grad=True)
        p = make_params()

        def build_loss():
            return T.sum_all(full_attention(X, p, causal=True))

        check_gradients(build_loss,
                        {"X": X, "W_q": p.W_q, "W_k": p.W_k,
                         "W_v": p.W_v, "W_o": p.W_o}, tol=1e-5)

    def test_window_fast_gradients(self):
        X = make_x(10, requires_grad=True)
        p = make_params()
        W = Tensor(np.random.default_rng(9).standard_normal((10, 8)))

        def build_loss():
            return T.sum_all(T.mul(window_attention_fast(X, p, 3, causal=True), W))

        check_gradients(build_loss,
                        {"X": X, "W_q": p.W_q, "W_k": p.W_k,
                         "W_v": p.W_v, "W_o": p.W_o}, tol=1e-5)

    def test_chunk_fast_gradients(self):
        X = make_x(11, requires_grad=True)
        p = make_params()

        def build_loss():
            return T.sum_all(chunk_attention_fast(X, p, 4, causal=True))

        check_gradients(build_loss,
                        {"X": X, "W_q": p.W_q, "W_v": p.W_v, "W_o": p.W_o},
                        tol=1e-5)

    def test_fast_and_reference_gradients_agree(self):
        # The two execution paths must induce the same gradient field.
        p = make_params()
        pat = LocalityPattern("window", window_w=3, causal=True)

        X1 = make_x(12, requires_grad=True)
        T.backward(T.sum_all(masked_attention(X1, p, pat)))
        g_ref, gq_ref = X1.grad.copy(), p.W_q.grad.copy()
        for t in (p.W_q, p.W_k, p.W_v, p.W_o):
            t.grad = None

        X2 = make_x(12, requires_grad=True)
        T.backward(T.sum_all(window_attention_fast(X2, p, 3, causal=True)))
        assert np.max(np.abs(X2.grad - g_ref)) < 1e-8
        assert np.max(np.abs(p.W_q.grad - gq_ref)) < 1e-8
        for t in (p.W_q, p.W_k, p.W_v, p.W_o):
            t.grad = None


class TestMemoryFootprint:
    def test_window_path_avoids_dense_scores(self):
        # At L=2048, a dense fp32 score matrix alone is 16 MiB per head;
        # the banded path must stay well under the dense path's footprint.
        d, w, L = 8, 4, 2048
        p = make_params(d=d, n_heads=1, dtype=np.float32, requires_grad=False)
        X = make_x(L, d=d, dtype=np.float32)
        with T.no_grad():
            T.reset_peak_memory()
            window_attention_fast(X, p, w)
            banded = T.peak_memory_bytes()
            T.reset_peak_memory()
            masked_attention(X, p, LocalityPattern("window", window_w=w))
            dense = T.peak_memory_bytes()
        assert banded < dense / 4
