import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from quadnet import tensor as T


def naive_conv(x, k, stride, pad):
    """Quadruple-loop cross-correlation used as an independent oracle."""
    b, ci, h, w = x.shape
    co, _, kh, kw = k.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    out = np.zeros((b, co, oh, ow))
    for n in range(b):
        for o in range(co):
            for i in range(oh):
                for j in range(ow):
                    win = xp[n, :, i * stride:i * stride + kh, j * stride:j * stride + kw]
                    out[n, o, i, j] = np.sum(win * k[o])
    return out


class TestMatmul:
    def test_basis_column(self):
        assert T.matmul(np.array([[1.0, 2.0]]), np.array([[1.0], [0.0]])).tolist() == [[1.0]]

    def test_identity(self, rng):
        w = rng.normal(size=(2, 2))
        assert np.array_equal(T.matmul(np.eye(2), w), w)

    def test_hand_evaluated(self):
        out = T.matmul(np.array([[1.0, 2], [3, 4]]), np.array([[5.0, 6], [7, 8]]))
        assert out.tolist() == [[19, 22], [43, 50]]

    def test_shape_mismatch_names_both(self):
        with pytest.raises(T.ShapeError, match=r"\(2, 3\).*\(2, 2\)"):
            T.matmul(np.zeros((2, 3)), np.zeros((2, 2)))

    @given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 6)),
                  elements=st.floats(-1e6, 1e6)))
    def test_right_identity_exact(self, x):
        assert np.array_equal(T.matmul(x, np.eye(x.shape[1])), x)

    def test_nonfinite_is_an_error(self):
        with pytest.raises(T.NonFiniteError):
            T.matmul(np.array([[1e200]]), np.array([[1e200]]))


class TestElementwise:
    def test_mul(self):
        assert T.elementwise("mul", np.array([1.0, 2, 3]), np.array([4.0, 5, 6])).tolist() == [4, 10, 18]

    def test_identities(self, rng):
        x = rng.normal(size=(3, 4))
        assert np.array_equal(T.elementwise("add", x, np.zeros_like(x)), x)
        assert np.array_equal(T.elementwise("mul", x, np.ones_like(x)), x)

    def test_bias_row_and_channel(self, rng):
        x = rng.normal(size=(3, 4))
        b = rng.normal(size=4)
        assert np.array_equal(T.elementwise("add", x, b), x + b[None])
        img = rng.normal(size=(2, 3, 4, 4))
        c = rng.normal(size=3)
        assert np.array_equal(T.elementwise("sub", img, c), img - c[None, :, None, None])

    def test_no_general_broadcasting(self):
        with pytest.raises(T.ShapeError):
            T.elementwise("add", np.zeros((3, 4)), np.zeros((3, 1)))
        with pytest.raises(ValueError):
            T.elementwise("div", np.zeros(2), np.zeros(2))


class TestConv:
    def test_all_ones(self):
        out = T.conv2d(np.ones((1, 1, 3, 3)), np.ones((1, 1, 3, 3)))
        assert out.tolist() == [[[[9.0]]]]

    def test_identity_kernel(self, rng):
        x = rng.normal(size=(2, 3, 5, 4))
        k = np.eye(3).reshape(3, 3, 1, 1)
        assert np.array_equal(T.conv2d(x, k), x)

    def test_ramp_stride_two(self):
        x = np.arange(16.0).reshape(1, 1, 4, 4)
        k = np.array([[1.0, 0], [0, 1]]).reshape(1, 1, 2, 2)
        assert T.conv2d(x, k, stride=2).tolist() == [[[[5, 9], [21, 25]]]]

    def test_impulse_reproduces_flipped_kernel(self, rng):
        k = rng.normal(size=(1, 1, 3, 3))
        x = np.zeros((1, 1, 5, 5))
        x[0, 0, 2, 2] = 1.0
        out = T.conv2d(x, k)
        # cross-correlation of an impulse at the centre yields the kernel flipped
        assert np.array_equal(out[0, 0], k[0, 0, ::-1, ::-1])

    @pytest.mark.parametrize("stride,pad", [(1, 0), (1, 2), (2, 1), (3, 1)])
    def test_matches_naive_loops(self, rng, stride, pad):
        x = rng.normal(size=(2, 3, 7, 7))
        k = rng.normal(size=(4, 3, 3, 3))
        np.testing.assert_allclose(T.conv2d(x, k, stride, pad), naive_conv(x, k, stride, pad), rtol=1e-12, atol=1e-12)

    def test_col2im_is_adjoint_of_im2col(self, rng):
        x = rng.normal(size=(2, 2, 7, 7))
        cols = T.im2col(x, 3, 3, 2, 1)
        r = rng.normal(size=cols.shape)
        lhs = np.sum(cols * r)
        rhs = np.sum(x * T.col2im(r, x.shape, 3, 3, 2, 1))
        assert math.isclose(lhs, rhs, rel_tol=1e-12)

    def test_non_integer_extent(self):
        with pytest.raises(T.ShapeError):
            T.conv2d(np.zeros((1, 1, 4, 4)), np.zeros((1, 1, 3, 3)), stride=2)

    def test_deterministic(self, rng):
        x = rng.normal(size=(2, 3, 8, 8))
        k = rng.normal(size=(4, 3, 3, 3))
        assert T.conv2d(x, k, 1, 1).tobytes() == T.conv2d(x.copy(), k.copy(), 1, 1).tobytes()


class TestPoolReluLoss:
    def test_relu(self):
        assert T.relu(np.array([-1.0, 0, 2])).tolist() == [0, 0, 2]

    def test_maxpool_of_four(self):
        pooled, idx = T.maxpool2(np.array([[[[1.0, 2], [3, 4]]]]))
        assert pooled.item() == 4
        assert divmod(int(idx.item()), 2) == (1, 1)

    def test_maxpool_odd_rejected(self):
        with pytest.raises(T.ShapeError):
            T.maxpool2(np.zeros((1, 1, 3, 4)))

    def test_maxpool_backward_routes_to_winner(self, rng):
        x = rng.normal(size=(2, 3, 4, 6))
        pooled, idx = T.maxpool2(x)
        g = rng.normal(size=pooled.shape)
        dx = T.maxpool2_backward(g, idx)
        assert np.count_nonzero(dx) == g.size
        assert np.array_equal(dx[x == np.repeat(np.repeat(pooled, 2, 2), 2, 3)], dx[dx != 0])

    def test_softmax_xent_two_zeros(self):
        loss, grad = T.softmax_xent(np.zeros((1, 2)), np.array([0]))
        assert math.isclose(loss, math.log(2), rel_tol=1e-15)
        np.testing.assert_allclose(grad, [[-0.5, 0.5]], rtol=0, atol=1e-15)

    def test_softmax_xent_gradient_matches_finite_differences(self):
        for seed in range(20):
            rng = np.random.default_rng(seed)
            logits = rng.normal(size=(3, 8))
            labels = rng.integers(0, 8, size=3)
            _, grad = T.softmax_xent(logits, labels)
            num = np.zeros_like(logits)
            h = 1e-6
            for idx in np.ndindex(logits.shape):
                up, down = logits.copy(), logits.copy()
                up[idx] += h
                down[idx] -= h
                num[idx] = (T.softmax_xent(up, labels)[0] - T.softmax_xent(down, labels)[0]) / (2 * h)
            rel = np.linalg.norm(grad - num) / np.linalg.norm(grad)
            assert rel < 1e-8

    def test_softmax_xent_label_range(self):
        with pytest.raises(ValueError, match="out of range"):
            T.softmax_xent(np.zeros((2, 3)), np.array([0, 3]))

    def test_logistic_loss_gradient(self, rng):
        z = rng.normal(size=(5, 1))
        y = np.array([0, 1, 1, 0, 1])
        _, g = T.logistic_loss(z, y)
        h = 1e-6
        for i in range(5):
            up, down = z.copy(), z.copy()
            up[i] += h
            down[i] -= h
            num = (T.logistic_loss(up, y)[0] - T.logistic_loss(down, y)[0]) / (2 * h)
            assert math.isclose(num, g[i, 0], rel_tol=1e-7)

    @settings(max_examples=50)
    @given(st.integers(1, 5), st.integers(2, 6), st.integers(0, 2**32 - 1))
    def test_softmax_gradient_rows_sum_to_zero(self, b, c, seed):
        rng = np.random.default_rng(seed)
        _, g = T.softmax_xent(rng.normal(size=(b, c)) * 5, rng.integers(0, c, size=b))
        np.testing.assert_allclose(g.sum(axis=1), 0.0, atol=1e-15)
