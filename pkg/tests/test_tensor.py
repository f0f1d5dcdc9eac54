import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from calcseg import tensor as T
from calcseg.errors import ConfigError, DimensionMismatchError
from oracles import central_difference, naive_conv2d


def make_layer(rng, out_c, in_c, k, dtype=np.float64):
    return T.ConvLayer(rng.standard_normal((out_c, in_c, k, k)).astype(dtype),
                       rng.standard_normal(out_c).astype(dtype))


def rel_err(a, b):
    return np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-12)


class TestConvForward:
    def test_identity_1x1(self, rng):
        x = rng.standard_normal((2, 1, 7, 5)).astype(np.float32)
        layer = T.ConvLayer(np.ones((1, 1, 1, 1), np.float32), np.zeros(1, np.float32))
        np.testing.assert_array_equal(T.conv2d_forward(x, layer), x)

    def test_ones_kernel_on_constant_image(self):
        x = np.ones((1, 1, 6, 6), np.float32)
        layer = T.ConvLayer(np.ones((1, 1, 3, 3), np.float32), np.zeros(1, np.float32))
        y = T.conv2d_forward(x, layer)[0, 0]
        assert y[0, 0] == y[0, -1] == y[-1, 0] == y[-1, -1] == 4.0
        assert y[0, 2] == 6.0
        np.testing.assert_array_equal(y[1:-1, 1:-1], 9.0)

    @pytest.mark.parametrize("dtype", [np.float32, np.float64])
    def test_matches_naive_loops(self, rng, dtype):
        x = rng.standard_normal((1, 2, 8, 8)).astype(dtype)
        layer = make_layer(rng, 3, 2, 3, dtype)
        ref = naive_conv2d(x, layer.kernel, layer.bias)
        assert rel_err(T.conv2d_forward(x, layer), ref) < 1e-6

    @settings(max_examples=20, deadline=None)
    @given(k=st.sampled_from([1, 3, 5, 7, 9]), h=st.integers(1, 12), w=st.integers(1, 12),
           seed=st.integers(0, 2**31))
    def test_shape_preserved_and_matches_oracle(self, k, h, w, seed):
        r = np.random.default_rng(seed)
        x = r.standard_normal((1, 2, h, w))
        layer = make_layer(r, 2, 2, k)
        y = T.conv2d_forward(x, layer)
        assert y.shape == (1, 2, h, w)
        assert rel_err(y, naive_conv2d(x, layer.kernel, layer.bias)) < 1e-6

    def test_channel_mismatch_names_both_shapes(self, rng):
        layer = make_layer(rng, 2, 3, 3)
        with pytest.raises(DimensionMismatchError, match=r"\(1, 2, 4, 4\)"):
            T.conv2d_forward(np.zeros((1, 2, 4, 4)), layer)

    def test_even_kernel_rejected(self):
        with pytest.raises(ConfigError):
            T.ConvLayer(np.zeros((1, 1, 2, 2)), np.zeros(1))


class TestConvBackward:
    def test_zero_grad_output(self, rng):
        x = rng.standard_normal((1, 2, 5, 5))
        layer = make_layer(rng, 3, 2, 3)
        gi, gk, gb = T.conv2d_backward(x, layer, np.zeros((1, 3, 5, 5)))
        assert not gi.any() and not gk.any() and not gb.any()

    def test_identity_layer_passes_gradient(self, rng):
        x = rng.standard_normal((1, 1, 4, 6))
        g = rng.standard_normal((1, 1, 4, 6))
        layer = T.ConvLayer(np.ones((1, 1, 1, 1)), np.zeros(1))
        gi, _, _ = T.conv2d_backward(x, layer, g)
        np.testing.assert_allclose(gi, g)

    def test_finite_differences(self, rng):
        x = rng.standard_normal((1, 2, 4, 4))
        layer = make_layer(rng, 2, 2, 3)
        weights = rng.standard_normal((1, 2, 4, 4))

        def loss():
            return float(np.sum(weights * T.conv2d_forward(x, layer)))

        gi, gk, gb = T.conv2d_backward(x, layer, weights)
        assert rel_err(gi, central_difference(loss, x)) < 1e-4
        assert rel_err(gk, central_difference(loss, layer.kernel)) < 1e-4
        assert rel_err(gb, central_difference(loss, layer.bias)) < 1e-4

    def test_grad_output_shape_checked(self, rng):
        layer = make_layer(rng, 2, 1, 3)
        with pytest.raises(DimensionMismatchError):
            T.conv2d_backward(np.zeros((1, 1, 4, 4)), layer, np.zeros((1, 2, 4, 5)))


class TestConcat:
    def test_single_input_is_identity(self, rng):
        a = rng.standard_normal((1, 3, 4, 4))
        np.testing.assert_array_equal(T.concat_channels([a]), a)

    def test_four_branches_of_16(self, rng):
        parts = [np.full((1, 16, 3, 3), i, np.float32) for i in range(4)]
        out = T.concat_channels(parts)
        assert out.shape == (1, 64, 3, 3)
        for i in range(4):
            assert np.all(out[:, 16 * i:16 * (i + 1)] == i)

    def test_associative(self, rng):
        a, b, c = (rng.standard_normal((2, n, 3, 4)) for n in (1, 2, 3))
        np.testing.assert_array_equal(T.concat_channels([a, T.concat_channels([b, c])]),
                                      T.concat_channels([a, b, c]))

    def test_split_gradient_matches_branch_finite_differences(self, rng):
        x = rng.standard_normal((1, 1, 4, 4))
        branches = [make_layer(rng, w, 1, k) for w, k in ((2, 1), (3, 3))]
        weights = rng.standard_normal((1, 5, 4, 4))

        def loss():
            return float(np.sum(weights * T.concat_channels(
                [T.conv2d_forward(x, l) for l in branches])))

        g_parts = T.split_channels(weights, [2, 3])
        for layer, g in zip(branches, g_parts):
            _, gk, _ = T.conv2d_backward(x, layer, g)
            assert rel_err(gk, central_difference(loss, layer.kernel)) < 1e-4

    def test_spatial_mismatch(self):
        with pytest.raises(DimensionMismatchError):
            T.concat_channels([np.zeros((1, 1, 4, 4)), np.zeros((1, 1, 4, 5))])


class TestActivations:
    def test_relu(self):
        assert T.activate(np.array(-1.5), "relu") == 0.0
        assert T.activate(np.array(2.0), "relu") == 2.0

    def test_sigmoid_at_zero(self):
        assert T.activate(np.array([0.0]), "sigmoid")[0] == 0.5

    def test_sigmoid_extremes_are_finite(self):
        s = T.sigmoid(np.array([-1000.0, 1000.0]))
        assert np.all(np.isfinite(s)) and s[0] == 0.0 and s[1] == 1.0

    @pytest.mark.parametrize("x0", [-4.0, 0.0, 4.0])
    def test_sigmoid_gradient(self, x0):
        x = np.array([x0])
        fd = central_difference(lambda: float(T.sigmoid(x)[0]), x, step=1e-5)
        np.testing.assert_allclose(T.activate_backward(x, np.ones(1), "sigmoid"), fd, atol=1e-6)

    def test_relu_gradient(self, rng):
        x = rng.standard_normal(50)
        x[np.abs(x) < 1e-3] = 0.5
        fd = central_difference(lambda: float(np.sum(T.activate(x, "relu"))), x)
        np.testing.assert_allclose(T.activate_backward(x, np.ones(50), "relu"), fd, atol=1e-6)

    def test_unknown_kind(self):
        with pytest.raises(ConfigError):
            T.activate(np.zeros(1), "tanh")
