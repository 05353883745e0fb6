import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cdcnn import nncore
from cdcnn.nncore import ShapeError


def _direct_conv2d(R, W, b):
    # plain loops, no vectorisation
    K, C, M, N = W.shape
    _, I, J = R.shape
    out = np.zeros((K, I - M + 1, J - N + 1))
    for k in range(K):
        for p in range(I - M + 1):
            for q in range(J - N + 1):
                out[k, p, q] = b[k] + sum(W[k, c, m, n] * R[c, p + m, q + n]
                                          for c in range(C) for m in range(M) for n in range(N))
    return out


class TestConv2d:
    def test_zero_weights_sigmoid_gives_half(self, rng):
        out = nncore.conv2d_two_channel(rng.random((2, 6, 5)), np.zeros((3, 2, 2, 3)), np.zeros(3))
        assert out.shape == (3, 5, 3)
        assert np.all(out == 0.5)

    def test_zero_input_gives_sigmoid_of_bias(self):
        out = nncore.conv2d_two_channel(np.zeros((2, 4, 4)), np.ones((2, 2, 3, 3)), np.array([0.3, -1.0]))
        np.testing.assert_allclose(out[0], nncore.sigmoid(0.3))
        np.testing.assert_allclose(out[1], nncore.sigmoid(-1.0))

    def test_ones_window_sum_is_eight(self):
        out = nncore.conv2d_two_channel(np.ones((2, 3, 3)), np.ones((1, 2, 2, 2)), np.zeros(1), "identity")
        assert out.shape == (1, 2, 2)
        assert np.all(out == 8.0)

    def test_matches_direct_summation(self, rng):
        R = rng.normal(size=(2, 7, 6))
        W = rng.normal(size=(3, 2, 3, 2))
        b = rng.normal(size=3)
        np.testing.assert_allclose(nncore.conv2d_two_channel(R, W, b, "identity"), _direct_conv2d(R, W, b), atol=1e-12)

    def test_batched_equals_per_sample(self, rng):
        R = rng.normal(size=(4, 2, 6, 6))
        W, b = rng.normal(size=(2, 2, 3, 3)), rng.normal(size=2)
        batched = nncore.conv2d_two_channel(R, W, b)
        for i in range(4):
            np.testing.assert_allclose(batched[i], nncore.conv2d_two_channel(R[i], W, b), atol=1e-14)

    def test_filter_larger_than_grid(self):
        with pytest.raises(ShapeError):
            nncore.conv2d_two_channel(np.zeros((2, 3, 3)), np.zeros((1, 2, 4, 2)), np.zeros(1))

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError):
            nncore.conv2d_two_channel(np.zeros((2, 5, 5)), np.zeros((1, 3, 2, 2)), np.zeros(1))

    def test_unknown_activation(self):
        with pytest.raises(ValueError, match="unknown activation"):
            nncore.conv2d_two_channel(np.zeros((2, 3, 3)), np.zeros((1, 2, 2, 2)), np.zeros(1), "relu")


class TestConv1d:
    def test_zero_weights_half(self, rng):
        out = nncore.conv1d_two_row(rng.random((2, 24)), np.zeros((4, 2, 3)), np.zeros(4))
        assert out.shape == (4, 22)
        assert np.all(out == 0.5)

    def test_identity_matches_loops(self, rng):
        U, W, b = rng.normal(size=(2, 24)), rng.normal(size=(2, 2, 5)), rng.normal(size=2)
        out = nncore.conv1d_two_row(U, W, b, "identity")
        for k in range(2):
            for t in range(20):
                assert out[k, t] == pytest.approx(b[k] + np.sum(W[k] * U[:, t:t + 5]))

    def test_long_filter_rejected(self):
        with pytest.raises(ShapeError):
            nncore.conv1d_two_row(np.zeros((2, 24)), np.zeros((1, 2, 25)), np.zeros(1))


class TestPooling:
    def test_exact_blocks(self):
        C = np.arange(16.0).reshape(1, 4, 4)
        out = nncore.avg_pool2d(C, 2)
        np.testing.assert_allclose(out[0], [[2.5, 4.5], [10.5, 12.5]])

    def test_partial_block_averages_what_it_holds(self):
        C = np.ones((1, 5, 5))
        C[0, 4, 4] = 9.0
        out = nncore.avg_pool2d(C, 2)
        assert out.shape == (1, 3, 3)
        assert out[0, 2, 2] == 9.0
        assert out[0, 0, 0] == 1.0

    def test_pool1d(self):
        out = nncore.avg_pool1d(np.arange(5.0)[None], 2)
        np.testing.assert_allclose(out[0], [0.5, 2.5, 4.0])

    def test_window_must_be_positive(self):
        with pytest.raises(ValueError):
            nncore.avg_pool2d(np.ones((1, 3, 3)), 0)

    def test_backward_conserves_mass_per_block(self, rng):
        g = rng.normal(size=(2, 3, 3))
        back = nncore.avg_pool2d_backward((2, 5, 6), 2, g).input
        assert back.shape == (2, 5, 6)
        np.testing.assert_allclose(back[:, :2, :2].sum(axis=(1, 2)), g[:, 0, 0])
        np.testing.assert_allclose(back[:, 4:, 4:].sum(axis=(1, 2)), g[:, 2, 2])

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 12), st.integers(1, 12), st.integers(1, 5))
    def test_shape_law(self, P, Q, D):
        out = nncore.avg_pool2d(np.zeros((1, P, Q)), D)
        assert out.shape == (1, -(-P // D), -(-Q // D))


class TestDense:
    def test_zero_weights_half(self):
        assert np.all(nncore.dense_forward(np.ones(4), np.zeros((3, 4)), np.zeros(3)) == 0.5)

    def test_identity_passthrough(self, rng):
        x = rng.normal(size=5)
        np.testing.assert_array_equal(nncore.dense_forward(x, np.eye(5), np.zeros(5), "identity"), x)

    def test_input_gradient_is_transpose(self, rng):
        x, W, g = rng.normal(size=4), rng.normal(size=(3, 4)), rng.normal(size=3)
        out = nncore.dense_forward(x, W, np.zeros(3), "identity")
        bundle = nncore.dense_backward(x, W, out, g, "identity")
        np.testing.assert_allclose(bundle.input, W.T @ g)

    def test_width_mismatch(self):
        with pytest.raises(ShapeError):
            nncore.dense_forward(np.ones(3), np.zeros((2, 4)), np.zeros(2))

    def test_upstream_shape_checked(self, rng):
        x, W = rng.normal(size=(2, 4)), rng.normal(size=(3, 4))
        out = nncore.dense_forward(x, W, np.zeros(3))
        with pytest.raises(ShapeError):
            nncore.dense_backward(x, W, out, np.ones((2, 2)))


class TestLinearity:
    @settings(max_examples=30, deadline=None)
    @given(st.floats(-3, 3), st.integers(0, 2 ** 16))
    def test_conv_and_dense_homogeneous(self, alpha, seed):
        rng = np.random.default_rng(seed)
        R, W = rng.normal(size=(2, 5, 5)), rng.normal(size=(2, 2, 2, 2))
        z = np.zeros(2)
        f = lambda r, w: nncore.conv2d_two_channel(r, w, z, "identity")
        np.testing.assert_allclose(f(alpha * R, W), alpha * f(R, W), atol=1e-10)
        np.testing.assert_allclose(f(R, alpha * W), alpha * f(R, W), atol=1e-10)
        x, V = rng.normal(size=6), rng.normal(size=(3, 6))
        np.testing.assert_allclose(nncore.dense_forward(alpha * x, V, np.zeros(3), "identity"),
                                   alpha * nncore.dense_forward(x, V, np.zeros(3), "identity"), atol=1e-10)


class TestOracle:
    def test_quadratic(self, rng):
        x = rng.normal(size=(3, 2))
        np.testing.assert_allclose(nncore.finite_difference_grad(lambda v: np.sum(v ** 2), x), 2 * x, atol=1e-8)

    def test_dict_params_restored(self, rng):
        params = {"a": rng.normal(size=3), "b": rng.normal(size=2)}
        before = {k: v.copy() for k, v in params.items()}
        g = nncore.finite_difference_grad(lambda p: np.sum(p["a"]) * np.sum(p["b"]), params)
        np.testing.assert_allclose(g["a"], np.full(3, before["b"].sum()), atol=1e-8)
        for k in params:
            np.testing.assert_array_equal(params[k], before[k])

    def test_epsilon_positive(self):
        with pytest.raises(ValueError):
            nncore.finite_difference_grad(lambda v: 0.0, np.zeros(1), epsilon=0)

    def test_relative_errors(self):
        assert nncore.max_relative_error(np.array([1.0, 0.0]), np.array([1.0, 0.0])) == 0.0
        assert nncore.max_relative_error(np.array([2.0]), np.array([1.0])) == pytest.approx(0.5)
        assert nncore.tensor_relative_error(np.array([3.0, 4.0]), np.array([3.0, 4.0 + 5e-3])) == pytest.approx(1e-3, rel=1e-2)


class TestBackwardAgainstOracle:
    @pytest.mark.parametrize("act", nncore.ACTIVATIONS)
    def test_conv2d(self, rng, act):
        R, W, b = rng.normal(size=(2, 2, 5, 4)), rng.normal(size=(2, 2, 2, 3)), rng.normal(size=2)
        out = nncore.conv2d_two_channel(R, W, b, act)
        probe = rng.normal(size=out.shape)
        g = nncore.conv2d_two_channel_backward(R, W, out, probe, act)
        f = lambda p: np.sum(probe * nncore.conv2d_two_channel(p["R"], p["W"], p["b"], act))
        num = nncore.finite_difference_grad(f, {"R": R, "W": W, "b": b})
        assert nncore.tensor_relative_error({"R": g.input, **g.params}, num) < 1e-7

    @pytest.mark.parametrize("act", nncore.ACTIVATIONS)
    def test_conv1d(self, rng, act):
        U, W, b = rng.normal(size=(3, 2, 24)), rng.normal(size=(2, 2, 4)), rng.normal(size=2)
        out = nncore.conv1d_two_row(U, W, b, act)
        probe = rng.normal(size=out.shape)
        g = nncore.conv1d_two_row_backward(U, W, out, probe, act)
        f = lambda p: np.sum(probe * nncore.conv1d_two_row(p["U"], p["W"], p["b"], act))
        num = nncore.finite_difference_grad(f, {"U": U, "W": W, "b": b})
        assert nncore.tensor_relative_error({"U": g.input, **g.params}, num) < 1e-7

    def test_unbatched_backward(self, rng):
        R, W, b = rng.normal(size=(2, 4, 4)), rng.normal(size=(1, 2, 2, 2)), np.zeros(1)
        out = nncore.conv2d_two_channel(R, W, b)
        g = nncore.conv2d_two_channel_backward(R, W, out, np.ones_like(out))
        assert g.input.shape == R.shape


def test_glorot_bounds(rng):
    w = nncore.glorot_uniform(rng, (50, 40), 40, 50)
    assert np.abs(w).max() <= np.sqrt(6 / 90)
