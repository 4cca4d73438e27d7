import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from seesawface import tensor as T
from seesawface.layers import Linear, MissingContextError, layer_backward

from oracles import fast_naive_conv2d, naive_conv2d, naive_matmul, naive_maxpool2x2


class TestConv2d:
    def test_all_ones_sum(self):
        out = T.conv2d_forward(np.ones((1, 1, 3, 3)), np.ones((1, 1, 3, 3)))
        assert out.shape == (1, 1, 1, 1)
        assert out[0, 0, 0, 0] == 9.0

    def test_stem_shape(self):
        x = np.zeros((1, 3, 112, 112), np.float32)
        w = np.zeros((64, 3, 3, 3), np.float32)
        assert T.conv2d_forward(x, w, stride=2, padding=1).shape == (1, 64, 56, 56)

    def test_grouped_matches_nested_loops(self, rng):
        x = rng.standard_normal((2, 4, 8, 8))
        w = rng.standard_normal((6, 2, 3, 3))
        got = T.conv2d_forward(x, w, stride=1, padding=1, groups=2)
        want = naive_conv2d(x, w, stride=1, padding=1, groups=2)
        np.testing.assert_allclose(got, want, rtol=1e-6, atol=1e-12)

    @pytest.mark.parametrize("stride,padding,k", [(1, 0, 3), (2, 1, 3), (2, 0, 1), (1, 0, 1), (3, 2, 5)])
    def test_strides_and_padding(self, rng, stride, padding, k):
        x = rng.standard_normal((2, 3, 9, 7))
        w = rng.standard_normal((4, 3, k, k))
        np.testing.assert_allclose(T.conv2d_forward(x, w, stride, padding),
                                   fast_naive_conv2d(x, w, stride, padding), rtol=1e-6, atol=1e-12)

    def test_channel_mismatch_names_dimension(self):
        with pytest.raises(T.ShapeError, match="in_channels"):
            T.conv2d_forward(np.zeros((1, 3, 4, 4)), np.zeros((2, 4, 1, 1)))

    def test_groups_must_divide(self):
        with pytest.raises(ValueError, match="groups"):
            T.conv2d_forward(np.zeros((1, 3, 4, 4)), np.zeros((4, 1, 1, 1)), groups=2)

    def test_linearity(self, rng):
        x, y = rng.standard_normal((2, 2, 3, 6, 6))
        w = rng.standard_normal((5, 3, 3, 3))
        a, b = 1.7, -0.4
        lhs = T.conv2d_forward(a * x + b * y, w, 1, 1)
        rhs = a * T.conv2d_forward(x, w, 1, 1) + b * T.conv2d_forward(y, w, 1, 1)
        np.testing.assert_allclose(lhs, rhs, rtol=1e-10, atol=1e-10)

    @settings(max_examples=40, deadline=None)
    @given(n=st.integers(1, 2), c=st.integers(1, 4), h=st.integers(1, 12), w=st.integers(1, 12),
           k=st.sampled_from([1, 3]), stride=st.integers(1, 2), pad=st.integers(0, 1),
           out=st.integers(1, 4))
    def test_output_shape_formula(self, n, c, h, w, k, stride, pad, out):
        if h + 2 * pad < k or w + 2 * pad < k:
            return
        y = T.conv2d_forward(np.zeros((n, c, h, w)), np.zeros((out, c, k, k)), stride, pad)
        assert y.shape == (n, out, (h + 2 * pad - k) // stride + 1, (w + 2 * pad - k) // stride + 1)


class TestDepthwise:
    def test_identity_kernel(self):
        x = np.stack([np.ones((3, 3)), 2 * np.ones((3, 3))])[None]
        w = np.zeros((2, 1, 3, 3))
        w[:, 0, 1, 1] = 1
        out = T.depthwise_conv2d_forward(x, w, 1, 1)
        assert out[0, 0, 1, 1] == 1.0
        assert out[0, 1, 1, 1] == 2.0

    def test_table_shape(self):
        out = T.depthwise_conv2d_forward(np.zeros((1, 64, 56, 56)), np.zeros((64, 1, 3, 3)), 1, 1)
        assert out.shape == (1, 64, 56, 56)

    def test_equals_grouped_conv(self, rng):
        x = rng.standard_normal((1, 8, 6, 6))
        w = rng.standard_normal((8, 1, 3, 3))
        np.testing.assert_allclose(T.depthwise_conv2d_forward(x, w, 1, 1),
                                   T.conv2d_forward(x, w, 1, 1, groups=8), rtol=1e-6, atol=1e-12)

    def test_channel_count_mismatch(self):
        with pytest.raises(T.ShapeError, match="channels"):
            T.depthwise_conv2d_forward(np.zeros((1, 3, 4, 4)), np.zeros((2, 1, 3, 3)))

    def test_locality(self, rng):
        x = rng.standard_normal((1, 5, 7, 7))
        w = rng.standard_normal((5, 1, 3, 3))
        base = T.depthwise_conv2d_forward(x, w, 2, 1)
        x2 = x.copy()
        x2[0, 3] += rng.standard_normal((7, 7))
        moved = T.depthwise_conv2d_forward(x2, w, 2, 1)
        changed = np.abs(moved - base).reshape(5, -1).max(axis=1) > 0
        assert changed.tolist() == [False, False, False, True, False]


class TestGlobalDepthwise:
    def test_shape(self):
        assert T.global_depthwise_conv(np.zeros((1, 512, 7, 7)), np.zeros((512, 1, 7, 7))).shape == (1, 512, 1, 1)

    def test_average_of_constant(self):
        x = np.full((2, 4, 7, 7), 3.25)
        w = np.full((4, 1, 7, 7), 1 / 49)
        np.testing.assert_allclose(T.global_depthwise_conv(x, w), 3.25, rtol=1e-12)

    def test_equals_depthwise_without_padding(self, rng):
        x = rng.standard_normal((2, 6, 7, 7))
        w = rng.standard_normal((6, 1, 7, 7))
        np.testing.assert_allclose(T.global_depthwise_conv(x, w),
                                   T.depthwise_conv2d_forward(x, w, 1, 0), rtol=1e-6)

    def test_spatial_mismatch(self):
        with pytest.raises(T.ShapeError, match="kernel size"):
            T.global_depthwise_conv(np.zeros((1, 2, 6, 6)), np.zeros((2, 1, 7, 7)))


class TestBatchNorm:
    def test_identity_infer(self, rng):
        x = rng.standard_normal((2, 3, 4, 4))
        out, _ = T.batchnorm_forward(x, np.ones(3), np.zeros(3), np.zeros(3), np.ones(3),
                                     train=False, eps=0.0)
        np.testing.assert_array_equal(out, x)

    def test_train_output_stats(self, rng):
        x = rng.standard_normal((4, 3, 5, 5)) * 3 + 2
        gamma, beta = np.array([0.5, 2.0, 1.5]), np.array([1.0, -1.0, 0.0])
        out, _ = T.batchnorm_forward(x, gamma, beta, np.zeros(3), np.ones(3), train=True)
        np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), beta, atol=1e-4)
        np.testing.assert_allclose(out.std(axis=(0, 2, 3)), gamma, rtol=1e-4)

    def test_affine_value(self):
        out, _ = T.batchnorm_forward(np.ones((1, 1, 1, 1)), np.array([2.0]), np.array([3.0]),
                                     np.array([1.0]), np.array([1.0]), train=False, eps=0.0)
        assert out.item() == 3.0

    def test_running_stats_update(self, rng):
        x = rng.standard_normal((8, 2, 3, 3))
        rm, rv = np.zeros(2), np.ones(2)
        T.batchnorm_forward(x, np.ones(2), np.zeros(2), rm, rv, train=True, momentum=0.1)
        np.testing.assert_allclose(rm, 0.1 * x.mean(axis=(0, 2, 3)))
        np.testing.assert_allclose(rv, 0.9 + 0.1 * x.var(axis=(0, 2, 3), ddof=1))

    def test_empty_batch_in_train_mode(self):
        with pytest.raises(ValueError):
            T.batchnorm_forward(np.zeros((0, 2, 3, 3)), np.ones(2), np.zeros(2), np.zeros(2),
                                np.ones(2), train=True)


class TestActivations:
    def test_values(self):
        assert T.swish(np.array(0.0)) == 0.0
        assert T.sigmoid(np.array(0.0)) == 0.5
        assert T.swish(np.array(1.0)) == pytest.approx(1 / (1 + math.exp(-1)), abs=1e-12)
        assert T.swish(np.array(1.0)) == pytest.approx(0.731059, abs=1e-6)

    def test_swish_derivative_at_zero(self):
        dx, _ = T.activation_backward(np.zeros((1, 1, 1, 1)), np.ones((1, 1, 1, 1)), "swish")
        assert dx.item() == 0.5

    def test_prelu_per_channel(self):
        x = np.array([-1.0, -1.0, 2.0]).reshape(1, 3, 1, 1)
        out = T.activation(x, "prelu", np.array([0.1, 0.5, 0.9]))
        np.testing.assert_allclose(out.ravel(), [-0.1, -0.5, 2.0])

    def test_unknown(self):
        with pytest.raises(ValueError):
            T.activation(np.zeros((1, 1, 1, 1)), "gelu")


class TestMaxPool:
    def test_single_window(self):
        assert T.max_pool2d(np.array([[[[1.0, 2.0], [3.0, 4.0]]]])).item() == 4.0

    def test_constant(self):
        np.testing.assert_array_equal(T.max_pool2d(np.full((1, 2, 6, 6), 7.0)), 7.0)

    def test_matches_brute_force(self, rng):
        x = rng.standard_normal((1, 3, 8, 8))
        np.testing.assert_array_equal(T.max_pool2d(x), naive_maxpool2x2(x))

    def test_odd_sizes_floor(self, rng):
        x = rng.standard_normal((2, 2, 7, 5))
        out = T.max_pool2d(x)
        assert out.shape == (2, 2, 3, 2)
        np.testing.assert_array_equal(out, naive_maxpool2x2(x))


class TestLinear:
    def test_identity(self, rng):
        x = rng.standard_normal((3, 5))
        np.testing.assert_array_equal(T.linear_forward(x, np.eye(5)), x)

    def test_embedding_shape(self):
        assert T.linear_forward(np.zeros((1, 512)), np.zeros((512, 512))).shape == (1, 512)

    def test_matches_triple_loop(self, rng):
        x = rng.standard_normal((4, 3))
        w = rng.standard_normal((2, 3))
        np.testing.assert_allclose(T.linear_forward(x, w), naive_matmul(x, w.T), rtol=1e-6)

    def test_mismatch(self):
        with pytest.raises(T.ShapeError, match="in_features"):
            T.linear_forward(np.zeros((1, 4)), np.zeros((2, 3)))

    def test_sum_loss_gradient_is_column_sums(self, rng):
        layer = Linear(4, 3, dtype=np.float64)
        layer.params["weight"][...] = rng.standard_normal((3, 4))
        x = rng.standard_normal((1, 4))
        out = layer.forward(x)
        dx, grads = layer_backward(layer, x, np.ones_like(out))
        np.testing.assert_allclose(dx[0], layer.params["weight"].sum(axis=0))
        assert set(grads) == {"weight"}

    def test_backward_without_forward(self):
        layer = Linear(2, 2)
        with pytest.raises(MissingContextError):
            layer_backward(layer, np.zeros((1, 2)), np.zeros((1, 2)))
