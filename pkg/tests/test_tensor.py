import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import check_gradients, rel_err
from spade import tensor as T


def t64(arr, grad=True):
    return T.tensor(np.asarray(arr, dtype=np.float64), requires_grad=grad)


class TestMatmul:
    def test_identity(self, rng):
        m = rng.standard_normal((3, 3))
        out = T.matmul(T.tensor(np.eye(3)), T.tensor(m))
        np.testing.assert_allclose(out.data, m, rtol=1e-6)

    def test_hand_arithmetic(self):
        out = T.matmul(T.tensor([[1.0, 2.0], [3.0, 4.0]]), T.tensor([[0.0], [1.0]]))
        np.testing.assert_array_equal(out.data, [[2.0], [4.0]])

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(T.DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
            T.matmul(T.tensor(np.zeros((2, 3))), T.tensor(np.zeros((2, 3))))

    def test_gradient_matches_finite_differences(self, rng):
        a = t64(rng.standard_normal((5, 4)))
        b = t64(rng.standard_normal((4, 3)))
        check_gradients(lambda: T.sum_all(T.mul(mm := T.matmul(a, b), mm)),
                        {"a": a, "b": b})


class TestSoftmax:
    def test_symmetry(self):
        out = T.softmax_rows(T.tensor([[0.0, 0.0]]))
        np.testing.assert_allclose(out.data, [[0.5, 0.5]])

    def test_no_overflow_on_large_logits(self):
        out = T.softmax_rows(T.tensor([[1000.0, 1000.0]]))
        np.testing.assert_allclose(out.data, [[0.5, 0.5]])

    def test_hand_arithmetic(self):
        out = T.softmax_rows(T.tensor([[0.0, np.log(3.0)]], dtype=np.float64))
        np.testing.assert_allclose(out.data, [[0.25, 0.75]], atol=1e-12)

    def test_rows_sum_to_one(self, rng):
        out = T.softmax_rows(T.tensor(rng.standard_normal((7, 9))))
        np.testing.assert_allclose(out.data.sum(axis=1), np.ones(7), atol=1e-6)

    def test_masked_entries_exactly_zero(self, rng):
        x = rng.standard_normal((4, 5))
        mask = np.zeros((4, 5))
        mask[:, 2] = -np.inf
        out = T.softmax_rows(T.tensor(x), mask=mask)
        assert np.all(out.data[:, 2] == 0.0)
        np.testing.assert_allclose(out.data.sum(axis=1), np.ones(4), atol=1e-6)

    def test_fully_masked_row_is_all_zeros_and_flagged(self):
        x = np.zeros((2, 3))
        mask = np.zeros((2, 3))
        mask[1] = -np.inf
        out = T.softmax_rows(T.tensor(x), mask=mask)
        assert np.all(out.data[1] == 0.0)
        np.testing.assert_array_equal(T.fully_masked_rows(x, mask), [False, True])

    @settings(deadline=None, max_examples=30)
    @given(st.lists(st.floats(-50, 50), min_size=2, max_size=6),
           st.floats(-100, 100))
    def test_shift_invariance(self, row, c):
        base = T.softmax_rows(T.tensor([row], dtype=np.float64))
        shifted = T.softmax_rows(T.tensor([[v + c for v in row]], dtype=np.float64))
        np.testing.assert_allclose(base.data, shifted.data, atol=1e-12)

    def test_gradient(self, rng):
        x = t64(rng.standard_normal((3, 4)))
        w = t64(rng.standard_normal((3, 4)))
        check_gradients(lambda: T.sum_all(T.mul(T.softmax_rows(x), w)), {"x": x})


class TestLayerNorm:
    def test_constant_row_collapses_to_bias(self):
        x = T.tensor([[3.0, 3.0, 3.0]])
        out = T.layer_norm(x, T.ones(3), T.zeros(3))
        np.testing.assert_allclose(out.data, np.zeros((1, 3)), atol=1e-2)

    def test_already_normalized(self):
        out = T.layer_norm(T.tensor([[-1.0, 1.0]], dtype=np.float64),
                           T.ones(2, dtype=np.float64), T.zeros(2, dtype=np.float64))
        np.testing.assert_allclose(out.data, [[-1.0, 1.0]], atol=1e-4)

    def test_row_stats(self, rng):
        x = T.tensor(rng.standard_normal((6, 16)), dtype=np.float64)
        out = T.layer_norm(x, T.ones(16, dtype=np.float64), T.zeros(16, dtype=np.float64))
        np.testing.assert_allclose(out.data.mean(axis=1), np.zeros(6), atol=1e-5)
        np.testing.assert_allclose(out.data.var(axis=1), np.ones(6), atol=1e-3)

    def test_gradient(self, rng):
        x = t64(rng.standard_normal((4, 8)))
        gain = t64(rng.standard_normal(8))
        bias = t64(rng.standard_normal(8))
        w = rng.standard_normal((4, 8))
        check_gradients(
            lambda: T.sum_all(T.mul(T.layer_norm(x, gain, bias), T.tensor(w))),
            {"x": x, "gain": gain, "bias": bias})


class TestFFTConv:
    def test_delta_kernel_is_identity(self, rng):
        sig = rng.standard_normal(16)
        ker = np.zeros(16)
        ker[0] = 1.0
        np.testing.assert_allclose(T.fft_conv(ker, sig), sig, atol=1e-10)

    def test_shift_kernel(self, rng):
        sig = rng.standard_normal(16)
        ker = np.zeros(16)
        ker[1] = 1.0
        out = T.fft_conv(ker, sig)
        assert abs(out[0]) < 1e-10
        np.testing.assert_allclose(out[1:], sig[:-1], atol=1e-10)

    @pytest.mark.parametrize("L", [1, 2, 3, 8, 64, 1000])
    def test_matches_direct_convolution(self, L, rng):
        ker = rng.standard_normal(L)
        sig = rng.standard_normal(L)
        np.testing.assert_allclose(T.fft_conv(ker, sig), T.direct_conv(ker, sig),
                                   atol=1e-10)

    def test_float32_tolerance(self, rng):
        ker = rng.standard_normal(64).astype(np.float32)
        sig = rng.standard_normal(64).astype(np.float32)
        assert np.abs(T.fft_conv(ker, sig) - T.direct_conv(ker, sig)).max() < 1e-5

    def test_length_mismatch(self):
        with pytest.raises(T.DimensionError):
            T.fft_conv(np.zeros(4), np.zeros(5))

    def test_channelwise_op_gradient(self, rng):
        k = t64(rng.standard_normal((3, 8)))
        u = t64(rng.standard_normal((8, 3)))
        w = rng.standard_normal((8, 3))
        check_gradients(
            lambda: T.sum_all(T.mul(T.causal_conv_channels(k, u), T.tensor(w))),
            {"k": k, "u": u})


class TestBackward:
    def test_sum_gives_ones(self, rng):
        x = t64(rng.standard_normal((3, 4)))
        T.backward(T.sum_all(x))
        np.testing.assert_array_equal(x.grad, np.ones((3, 4)))

    def test_sum_of_square_gives_2x(self, rng):
        x = t64(rng.standard_normal((3, 4)))
        T.backward(T.sum_all(T.mul(x, x)))
        np.testing.assert_allclose(x.grad, 2 * x.data, rtol=1e-12)

    def test_fanout_accumulates(self, rng):
        x = t64(rng.standard_normal((2, 2)))
        T.backward(T.sum_all(T.add(x, x)))
        np.testing.assert_array_equal(x.grad, np.full((2, 2), 2.0))

    def test_non_scalar_loss_rejected(self, rng):
        x = t64(rng.standard_normal((2, 2)))
        with pytest.raises(T.TapeError):
            T.backward(T.mul(x, x))

    def test_double_backward_rejected(self, rng):
        x = t64(rng.standard_normal((2, 2)))
        loss = T.sum_all(x)
        T.backward(loss)
        with pytest.raises(T.TapeError):
            T.backward(loss)

    def test_tape_topological_order(self, rng):
        x = t64(rng.standard_normal((2, 2)))
        y = T.mul(x, x)
        loss = T.sum_all(T.add(y, x))
        tape = T.trace(loss)
        pos = {id(n): i for i, n in enumerate(tape.nodes)}
        for node in tape.nodes:
            for p in node._parents:
                assert pos[id(p)] < pos[id(node)]

    def test_mlp_composite_gradient(self, rng):
        w1 = t64(rng.standard_normal((6, 5)))
        b1 = t64(rng.standard_normal(5))
        w2 = t64(rng.standard_normal((5, 2)))
        x = rng.standard_normal((4, 6))
        targets = np.array([0, 1, 1, 0])

        def loss():
            h = T.gelu(T.add(T.matmul(T.tensor(x), w1), b1))
            return T.cross_entropy(T.matmul(h, w2), targets)
        check_gradients(loss, {"w1": w1, "b1": b1, "w2": w2})

    def test_no_grad_records_nothing(self, rng):
        x = t64(rng.standard_normal((2, 2)))
        with T.no_grad():
            y = T.mul(x, x)
        assert not y.requires_grad and y._backward_fn is None


class TestElementwiseGradients:
    """Every differentiable op carries the finite-difference obligation."""

    @pytest.mark.parametrize("opname", ["add", "sub", "mul"])
    def test_binary_ops(self, opname, rng):
        op = getattr(T, opname)
        a = t64(rng.standard_normal((4, 3)))
        b = t64(rng.standard_normal((4, 3)))
        check_gradients(lambda: T.sum_all(T.mul(op(a, b), op(a, b))), {"a": a, "b": b})

    def test_row_broadcast(self, rng):
        a = t64(rng.standard_normal((4, 3)))
        b = t64(rng.standard_normal(3))
        check_gradients(lambda: T.sum_all(T.mul(T.add(a, b), T.add(a, b))),
                        {"a": a, "b": b})

    @pytest.mark.parametrize("opname", ["relu", "gelu", "neg", "transpose",
                                        "mean_rows", "mean_all"])
    def test_unary_ops(self, opname, rng):
        op = getattr(T, opname)
        a = t64(rng.standard_normal((4, 3)) + 0.05)  # stay off relu's kink

        def loss():
            y = op(a)
            return T.sum_all(T.mul(y, y)) if y.data.ndim else T.mul(y, y)
        check_gradients(loss, {"a": a})

    def test_scale_concat_slice_gather(self, rng):
        a = t64(rng.standard_normal((4, 3)))
        b = t64(rng.standard_normal((4, 2)))
        idx = np.array([0, 2, 2, 3])

        def loss():
            c = T.concat_cols(T.scale(a, 1.7), b)
            c = T.gather_rows(c, idx)
            c = T.slice_cols(c, 1, 4)
            c = T.slice_rows(c, 0, 3)
            return T.sum_all(T.mul(c, c))
        check_gradients(loss, {"a": a, "b": b})

    def test_embedding_and_cross_entropy(self, rng):
        table = t64(rng.standard_normal((7, 4)))
        w = t64(rng.standard_normal((4, 7)))
        ids = np.array([1, 3, 6, 3])
        targets = np.array([2, 0, 5, 1])
        check_gradients(lambda: T.cross_entropy(T.matmul(T.embedding(table, ids), w),
                                                targets),
                        {"table": table, "w": w})

    def test_dropout_inverted_scaling(self, rng):
        x = T.tensor(np.ones((1000, 4)))
        out = T.dropout(x, 0.25, np.random.default_rng(3), train=True)
        kept = out.data[out.data > 0]
        np.testing.assert_allclose(kept, 1.0 / 0.75)
        assert abs(out.data.mean() - 1.0) < 0.05
        same = T.dropout(x, 0.25, np.random.default_rng(3), train=False)
        assert same is x

    def test_embedding_out_of_vocab(self, rng):
        with pytest.raises(IndexError):
            T.embedding(t64(rng.standard_normal((4, 2))), np.array([4]))


class TestAllocationAccounting:
    def test_peak_tracks_live_bytes(self):
        T.reset_peak_memory()
        base = T.peak_memory_bytes()
        big = T.zeros((256, 256))
        assert T.peak_memory_bytes() >= base + big.data.nbytes
        del big


class TestNanGuard:
    @pytest.mark.filterwarnings("ignore:overflow:RuntimeWarning")
    def test_guard_fires_on_overflow(self):
        T.nan_guard = True
        try:
            x = T.tensor(np.array([[1e300]], dtype=np.float64))
            with pytest.raises(FloatingPointError):
                T.mul(x, x)
        finally:
            T.nan_guard = False
