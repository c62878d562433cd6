import numpy as np
import pytest

from synnet import layers
from synnet.exceptions import DegenerateStatisticsError, ShapeError, UsageError
from synnet.tensor import RngStream
from synnet.verify import conv_oracle, maxpool_oracle


def bn_params(c, gamma=1.0, beta=0.0):
    return layers.BatchNormParams(np.full(c, gamma), np.full(c, beta), np.zeros(c), np.ones(c))


class TestConv:

    def test_identity_1x1(self, rng):
        x = rng.uniform(-1, 1, (2, 3, 4, 5))
        p = layers.ConvParams(np.eye(3)[:, :, None, None], np.zeros(3))
        out, _ = layers.conv2d_forward(x, p)
        np.testing.assert_array_equal(out, x)

    def test_all_ones_counts_overlap(self):
        x = np.ones((1, 1, 3, 3))
        p = layers.ConvParams(np.ones((1, 1, 3, 3)), np.zeros(1))
        out, _ = layers.conv2d_forward(x, p)
        np.testing.assert_array_equal(out[0, 0], [[4, 6, 4], [6, 9, 6], [4, 6, 4]])

    def test_matches_direct_oracle(self):
        for case in range(50):
            rng = RngStream(case)
            n, c, o = (int(v) for v in rng.integers(1, 4, 3))
            h, w = (int(v) for v in rng.integers(1, 7, 2))
            k = 3 if case % 2 else 1
            x = rng.uniform(-1, 1, (n, c, h, w))
            p = layers.ConvParams(rng.uniform(-1, 1, (o, c, k, k)), rng.uniform(-1, 1, o))
            np.testing.assert_allclose(layers.conv2d_forward(x, p)[0], conv_oracle(x, p),
                                       rtol=0, atol=1e-12)

    def test_rejects_5x5_kernel(self):
        p = layers.ConvParams(np.zeros((1, 1, 5, 5)), np.zeros(1))
        with pytest.raises(ShapeError):
            layers.conv2d_forward(np.zeros((1, 1, 6, 6)), p)

    def test_rejects_channel_mismatch(self):
        p = layers.ConvParams(np.zeros((2, 3, 3, 3)), np.zeros(2))
        with pytest.raises(ShapeError):
            layers.conv2d_forward(np.zeros((1, 2, 4, 4)), p)

    def test_backward_checks_grad_shape(self):
        p = layers.ConvParams(np.zeros((2, 1, 3, 3)), np.zeros(2))
        _, tape = layers.conv2d_forward(np.zeros((1, 1, 4, 4)), p)
        with pytest.raises(ShapeError):
            layers.conv2d_backward(tape, np.zeros((1, 1, 4, 4)))

    def test_bias_gradient_sums_output_grad(self, rng):
        x = rng.uniform(-1, 1, (2, 2, 3, 3))
        p = layers.ConvParams(rng.uniform(-1, 1, (3, 2, 3, 3)), np.zeros(3))
        _, tape = layers.conv2d_forward(x, p)
        g = rng.uniform(-1, 1, (2, 3, 3, 3))
        _, grads = layers.conv2d_backward(tape, g)
        np.testing.assert_allclose(grads.bias, g.sum(axis=(0, 2, 3)))


class TestBatchNorm:

    def test_train_normalizes_per_channel(self, rng):
        x = rng.normal(3.0, 2.0, (4, 2, 5, 5))
        out, _ = layers.batchnorm_forward(x, bn_params(2, gamma=2.0, beta=0.5), layers.TRAIN)
        np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0.5, atol=1e-10)
        np.testing.assert_allclose(out.std(axis=(0, 2, 3)), 2.0, rtol=1e-4)

    def test_running_stats_come_back_through_tape(self, rng):
        x = rng.uniform(0, 1, (3, 2, 4, 4))
        p = bn_params(2)
        _, tape = layers.batchnorm_forward(x, p, layers.TRAIN)
        np.testing.assert_array_equal(p.running_mean, 0.0)
        np.testing.assert_allclose(tape.running_mean, 0.1 * x.mean(axis=(0, 2, 3)))
        np.testing.assert_allclose(tape.running_var, 0.9 + 0.1 * x.var(axis=(0, 2, 3)))

    def test_single_value_per_channel(self):
        with pytest.raises(DegenerateStatisticsError):
            layers.batchnorm_forward(np.ones((1, 2, 1, 1)), bn_params(2), layers.TRAIN)

    def test_infer_uses_running_stats(self, rng):
        x = rng.uniform(-1, 1, (1, 2, 1, 1))
        out, _ = layers.batchnorm_forward(x, bn_params(2), layers.INFER)
        np.testing.assert_allclose(out, x / np.sqrt(1.0 + 1e-5))

    def test_backward_needs_train_tape(self):
        _, tape = layers.batchnorm_forward(np.ones((2, 1, 2, 2)), bn_params(1), layers.INFER)
        with pytest.raises(UsageError):
            layers.batchnorm_backward(tape, np.ones((2, 1, 2, 2)))

    def test_gradient_sums_to_zero(self, rng):
        # Shifting all inputs of a channel leaves a normalized output unchanged.
        x = rng.uniform(-1, 1, (2, 3, 3, 3))
        _, tape = layers.batchnorm_forward(x, bn_params(3), layers.TRAIN)
        grad_in, _, _ = layers.batchnorm_backward(tape, rng.uniform(-1, 1, x.shape))
        np.testing.assert_allclose(grad_in.sum(axis=(0, 2, 3)), 0.0, atol=1e-10)


class TestRelu:

    def test_forward_and_zero_subgradient(self):
        x = np.array([-1.0, 0.0, 2.0]).reshape(1, 1, 1, 3)
        out, tape = layers.relu_forward(x)
        np.testing.assert_array_equal(out.ravel(), [0, 0, 2])
        grad = layers.relu_backward(tape, np.ones_like(x))
        np.testing.assert_array_equal(grad.ravel(), [0, 0, 1])

    def test_wrong_tape_kind(self):
        _, tape = layers.conv2d_forward(np.zeros((1, 1, 2, 2)),
                                        layers.ConvParams(np.zeros((1, 1, 1, 1)), np.zeros(1)))
        with pytest.raises(UsageError):
            layers.relu_backward(tape, np.zeros((1, 1, 2, 2)))


def test_linear_activation_passes_values_and_gradients_through():
    x = np.array([-2.5, 0.0, 7.0]).reshape(1, 1, 1, 3)
    np.testing.assert_array_equal(layers.linear_activation(x), x)
    np.testing.assert_array_equal(layers.linear_activation_backward(x), x)


class TestPooling:

    def test_window_maximum_and_offset(self):
        x = np.array([[1.0, 3.0], [2.0, 0.0]]).reshape(1, 1, 2, 2)
        pooled, idx, _ = layers.maxpool2x2_forward(x)
        assert pooled.ravel().tolist() == [3.0]
        assert idx.offsets.ravel().tolist() == [1]

    def test_ties_take_first_in_row_major_order(self):
        pooled, idx, _ = layers.maxpool2x2_forward(np.full((1, 1, 2, 2), 5.0))
        assert idx.offsets.ravel().tolist() == [0]
        x = np.array([[0.0, 1.0], [1.0, 1.0]]).reshape(1, 1, 2, 2)
        assert layers.maxpool2x2_forward(x)[1].offsets.ravel().tolist() == [1]

    def test_odd_size_rejected(self):
        with pytest.raises(ShapeError):
            layers.maxpool2x2_forward(np.zeros((1, 1, 3, 4)))

    def test_matches_window_scan(self):
        for case in range(1000):
            rng = RngStream(10000 + case)
            # few distinct levels so ties are frequent
            x = rng.integers(0, 4, (1, 2, 4, 6)).astype(np.float64)
            pooled, idx, _ = layers.maxpool2x2_forward(x)
            expected, offsets = maxpool_oracle(x)
            np.testing.assert_array_equal(pooled, expected)
            np.testing.assert_array_equal(idx.offsets, offsets)

    def test_backward_routes_to_argmax(self):
        x = np.array([[1.0, 3.0], [2.0, 0.0]]).reshape(1, 1, 2, 2)
        _, _, tape = layers.maxpool2x2_forward(x)
        grad = layers.maxpool2x2_backward(tape, np.full((1, 1, 1, 1), 7.0))
        np.testing.assert_array_equal(grad[0, 0], [[0, 7], [0, 0]])


class TestUnpool:

    def test_places_values_at_argmax_only(self, rng):
        x = rng.uniform(-1, 1, (2, 3, 4, 6))
        pooled, idx, _ = layers.maxpool2x2_forward(x)
        out, _ = layers.unpool2x2_forward(pooled, idx)
        mask = np.zeros(x.shape, dtype=bool)
        for n, c, i, j in np.ndindex(*pooled.shape):
            offset = idx.offsets[n, c, i, j]
            mask[n, c, 2 * i + offset // 2, 2 * j + offset % 2] = True
        np.testing.assert_array_equal(out[mask], x[mask])
        assert np.all(out[~mask] == 0.0)

    def test_pool_after_unpool_recovers_values(self, rng):
        _, idx, _ = layers.maxpool2x2_forward(rng.uniform(-1, 1, (1, 2, 6, 4)))
        v = rng.uniform(0.01, 1, idx.shape)
        pooled, again, _ = layers.maxpool2x2_forward(layers.unpool2x2_forward(v, idx)[0])
        np.testing.assert_array_equal(pooled, v)
        assert again == idx

    def test_shape_mismatch(self):
        _, idx, _ = layers.maxpool2x2_forward(np.zeros((1, 1, 4, 4)))
        with pytest.raises(ShapeError):
            layers.unpool2x2_forward(np.zeros((1, 1, 3, 2)), idx)

    def test_backward_gathers(self, rng):
        _, idx, _ = layers.maxpool2x2_forward(rng.uniform(-1, 1, (1, 1, 4, 4)))
        v = rng.uniform(-1, 1, idx.shape)
        _, tape = layers.unpool2x2_forward(v, idx)
        g = rng.uniform(-1, 1, (1, 1, 4, 4))
        # adjoint identity <unpool(v), g> == <v, unpool_backward(g)>
        lhs = np.sum(layers.unpool2x2_forward(v, idx)[0] * g)
        rhs = np.sum(v * layers.unpool2x2_backward(tape, g))
        assert lhs == pytest.approx(rhs, rel=1e-12)
