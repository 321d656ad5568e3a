"""Op semantics: frozen oracle values, error contracts, graph rules."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adaptlab import tensor as T
from adaptlab.tensor import AutodiffError, ShapeError, Tensor


def triple_loop_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Independent reference product, no vectorization."""
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n), dtype=a.dtype)
    for i in range(m):
        for j in range(n):
            for l in range(k):
                out[i, j] += a[i, l] * b[l, j]
    return out


def direct_conv1d(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Direct-summation depthwise conv oracle (zero same-padding)."""
    batch, channels, frames = x.shape
    k = w.shape[1]
    half = (k - 1) // 2
    y = np.zeros_like(x)
    for b in range(batch):
        for c in range(channels):
            for t in range(frames):
                acc = 0.0
                for j in range(k):
                    src = t + j - half
                    if 0 <= src < frames:
                        acc += x[b, c, src] * w[c, j]
                y[b, c, t] = acc
    return y


class TestMatmul:
    def test_identity(self):
        a = Tensor([[1.0, 0.0], [0.0, 1.0]])
        b = Tensor([[5.0, 6.0], [7.0, 8.0]])
        assert T.matmul(a, b).data.tolist() == [[5.0, 6.0], [7.0, 8.0]]

    def test_row_times_column(self):
        out = T.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]]))
        assert out.data.tolist() == [[11.0]]

    def test_matches_triple_loop_oracle(self, gen):
        a = gen.standard_normal((4, 5))
        b = gen.standard_normal((5, 3))
        got = T.matmul(Tensor(a), Tensor(b)).data
        np.testing.assert_allclose(got, triple_loop_matmul(a, b), atol=1e-6)

    def test_inner_dim_mismatch(self):
        with pytest.raises(ShapeError, match="inner extents"):
            T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))

    def test_batch_broadcast_mismatch(self):
        with pytest.raises(ShapeError, match="broadcastable"):
            T.matmul(Tensor(np.ones((2, 3, 4))), Tensor(np.ones((3, 4, 5))))

    def test_requires_2d(self):
        with pytest.raises(ShapeError):
            T.matmul(Tensor(np.ones(3)), Tensor(np.ones((3, 2))))


class TestDepthwiseConv:
    def test_identity_kernel(self, gen):
        x = gen.standard_normal((2, 3, 9))
        w = np.tile([0.0, 1.0, 0.0], (3, 1))
        out = T.depthwise_conv1d(Tensor(x), Tensor(w))
        np.testing.assert_array_equal(out.data, x)

    def test_box_kernel_frozen_value(self):
        x = Tensor(np.array([[[1.0, 2.0, 3.0, 4.0]]]))
        w = Tensor(np.array([[1.0, 1.0, 1.0]]))
        assert T.depthwise_conv1d(x, w).data.tolist() == [[[3.0, 6.0, 9.0, 7.0]]]

    def test_channel_independence(self, gen):
        x = gen.standard_normal((1, 4, 8))
        w = gen.standard_normal((4, 3))
        base = T.depthwise_conv1d(Tensor(x), Tensor(w)).data
        bumped = x.copy()
        bumped[0, 0] += 1.0
        out = T.depthwise_conv1d(Tensor(bumped), Tensor(w)).data
        assert not np.allclose(out[0, 0], base[0, 0])
        np.testing.assert_array_equal(out[0, 1:], base[0, 1:])

    def test_even_kernel_rejected(self):
        with pytest.raises(ShapeError, match="odd"):
            T.depthwise_conv1d(Tensor(np.ones((1, 1, 4))), Tensor(np.ones((1, 2))))

    def test_kernel_longer_than_sequence(self, gen):
        x = gen.standard_normal((1, 2, 3))
        w = gen.standard_normal((2, 9))
        got = T.depthwise_conv1d(Tensor(x), Tensor(w)).data
        np.testing.assert_allclose(got, direct_conv1d(x, w), atol=1e-12)

    @pytest.mark.parametrize("trial", range(10))
    def test_matches_direct_summation_oracle(self, trial):
        gen = np.random.default_rng(500 + trial)
        batch, channels, frames = gen.integers(1, 4), gen.integers(1, 5), gen.integers(2, 12)
        k = int(gen.choice([1, 3, 5, 7]))
        x = gen.standard_normal((batch, channels, frames))
        w = gen.standard_normal((channels, k))
        got = T.depthwise_conv1d(Tensor(x), Tensor(w)).data
        np.testing.assert_allclose(got, direct_conv1d(x, w), atol=1e-6)


class TestBackward:
    def test_sum_gradient(self):
        x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
        T.backward(T.tsum(x))
        assert x.grad.tolist() == [1.0, 1.0, 1.0]

    def test_square_gradient(self):
        x = Tensor([2.0, -1.0], requires_grad=True)
        T.backward(T.tsum(T.mul(x, x)))
        assert x.grad.tolist() == [4.0, -2.0]

    def test_fanout_accumulates(self):
        x = Tensor([3.0], requires_grad=True)
        y = T.add(x, x)
        T.backward(T.tsum(y))
        assert x.grad.tolist() == [2.0]

    def test_non_scalar_loss_rejected(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(AutodiffError, match="scalar"):
            T.backward(T.mul(x, x))

    def test_second_backward_rejected(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        loss = T.tsum(T.mul(x, x))
        T.backward(loss)
        with pytest.raises(AutodiffError, match="stale"):
            T.backward(loss)

    def test_backward_through_consumed_subgraph_rejected(self):
        x = Tensor([1.0], requires_grad=True)
        y = T.mul(x, x)
        T.backward(T.tsum(y))
        with pytest.raises(AutodiffError, match="stale"):
            T.backward(T.tsum(T.scale(y, 2.0)))

    def test_frozen_leaf_gets_no_grad(self):
        frozen = Tensor([1.0, 2.0])
        live = Tensor([3.0, 4.0], requires_grad=True)
        T.backward(T.tsum(T.mul(frozen, live)))
        assert frozen.grad is None
        assert live.grad is not None

    def test_no_grad_context(self):
        x = Tensor([1.0], requires_grad=True)
        with T.no_grad():
            y = T.mul(x, x)
        assert not y.requires_grad


class TestNormalizations:
    def test_softmax_rows_sum_to_one(self, gen):
        x = Tensor(gen.standard_normal((6, 9)) * 3)
        rows = T.softmax(x).data.sum(axis=-1)
        np.testing.assert_allclose(rows, 1.0, atol=1e-6)

    def test_log_softmax_matches_log_of_softmax(self, gen):
        x = Tensor(gen.standard_normal((4, 7)) * 2)
        np.testing.assert_allclose(
            T.log_softmax(x).data, np.log(T.softmax(x).data), atol=1e-6
        )

    def test_layer_norm_statistics(self, gen):
        x = Tensor(gen.standard_normal((3, 8)) * 4 + 2)
        y = T.layer_norm(x).data
        np.testing.assert_allclose(y.mean(axis=-1), 0.0, atol=1e-6)
        np.testing.assert_allclose(y.var(axis=-1), 1.0, atol=1e-4)

    def test_cross_entropy_uniform_logits_is_ln2(self):
        logits = Tensor(np.zeros((8, 2)))
        targets = np.array([0, 1] * 4)
        assert abs(T.cross_entropy(logits, targets).item() - np.log(2.0)) < 1e-6


class TestShapeOps:
    @given(
        st.integers(min_value=1, max_value=4),
        st.lists(st.integers(min_value=1, max_value=5), min_size=1, max_size=4),
    )
    @settings(max_examples=25, deadline=None)
    def test_concat_then_split_is_identity(self, rows, sizes):
        gen = np.random.default_rng(rows * 100 + sum(sizes))
        pieces = [gen.standard_normal((rows, s)) for s in sizes]
        joined = T.concat([Tensor(p) for p in pieces], axis=1)
        back = T.split(joined, sizes, axis=1)
        for original, piece in zip(pieces, back):
            np.testing.assert_array_equal(piece.data, original)

    def test_split_then_concat_is_identity(self, gen):
        x = gen.standard_normal((3, 10))
        parts = T.split(Tensor(x), [2, 5, 3], axis=1)
        np.testing.assert_array_equal(T.concat(parts, axis=1).data, x)

    def test_split_size_mismatch(self):
        with pytest.raises(ShapeError, match="sum"):
            T.split(Tensor(np.ones((2, 5))), [2, 2], axis=1)

    def test_transpose_roundtrip(self, gen):
        x = gen.standard_normal((2, 3, 4))
        once = T.transpose(Tensor(x), (2, 0, 1))
        np.testing.assert_array_equal(T.transpose(once, (1, 2, 0)).data, x)

    def test_mixed_dtype_rejected(self):
        a = Tensor(np.ones(3, dtype=np.float32))
        b = Tensor(np.ones(3, dtype=np.float64))
        with pytest.raises(ShapeError, match="dtype"):
            T.add(a, b)


class TestDeterminism:
    def test_identical_seed_bit_identical(self):
        def run():
            gen = np.random.default_rng(77)
            x = Tensor(gen.standard_normal((4, 6)).astype(np.float32), requires_grad=True)
            w = Tensor(gen.standard_normal((6, 3)).astype(np.float32), requires_grad=True)
            out = T.softmax(T.gelu(T.matmul(x, w)))
            loss = T.mean(out)
            T.backward(loss)
            return out.data.copy(), x.grad.copy(), w.grad.copy()

        first, second = run(), run()
        for a, b in zip(first, second):
            np.testing.assert_array_equal(a, b)
