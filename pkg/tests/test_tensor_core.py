import numpy as np
import pytest

from errors import CheckpointError, ConfigurationError, GradientError, ShapeError
from tensor_core import (
    EVAL, TRAIN, LayerSpec, LRSchedule, OptimizerState, adam_step, build_layer, check_gradients, grad_check,
    l2_normalize, l2_normalize_backward, layer_backward, layer_forward, load_checkpoint, lr_decay, mlp,
    save_checkpoint,
)


def _layer(spec, seed=0):
    return build_layer(spec, np.random.default_rng(seed), np.float64)


class TestLayerSpec:

    def test_unknown_kind(self):
        with pytest.raises(ConfigurationError):
            LayerSpec('conv3d')

    def test_invalid_stride_and_dropout(self):
        with pytest.raises(ConfigurationError):
            LayerSpec('conv2d', 1, 1, 3, stride=0)
        with pytest.raises(ConfigurationError):
            LayerSpec('dropout', dropout_rate=1.0)


class TestForward:

    def test_conv2d_stride_two_halves_with_ceil(self, rng):
        conv = _layer(LayerSpec('conv2d', 8, 4, 3, stride=2))
        y, _ = layer_forward(conv, rng.standard_normal((2, 8, 9, 33)))
        assert y.shape == (2, 4, 5, 17)

    def test_conv2d_identity_kernel(self, rng):
        conv = _layer(LayerSpec('conv2d', 1, 1, 3, bias=False))
        conv.params['weight'][...] = 0.0
        conv.params['weight'][0, 0, 1, 1] = 1.0
        x = rng.standard_normal((1, 1, 6, 5))
        y, _ = layer_forward(conv, x)
        np.testing.assert_allclose(y, x)

    def test_conv1d_dilated_keeps_length(self, rng):
        conv = _layer(LayerSpec('conv1d-dilated', 3, 5, 3, dilation=4))
        y, _ = layer_forward(conv, rng.standard_normal((2, 3, 16)))
        assert y.shape == (2, 5, 16)

    def test_conv1d_stride_two(self, rng):
        conv = _layer(LayerSpec('conv1d-dilated', 3, 3, 3, stride=2))
        y, _ = layer_forward(conv, rng.standard_normal((1, 3, 17)))
        assert y.shape == (1, 3, 9)

    def test_channel_mismatch(self, rng):
        conv = _layer(LayerSpec('conv2d', 8, 4, 3))
        with pytest.raises(ShapeError, match='channel'):
            layer_forward(conv, rng.standard_normal((1, 3, 5, 5)))

    def test_relu_and_gelu_values(self):
        x = np.array([[-1.0, 0.0, 2.0]])
        y, _ = layer_forward(_layer(LayerSpec('relu')), x)
        np.testing.assert_array_equal(y, [[0.0, 0.0, 2.0]])
        g, _ = layer_forward(_layer(LayerSpec('gelu')), np.array([[0.0, 1.0]]))
        np.testing.assert_allclose(g, [[0.0, 0.8413447460685429]], atol=1e-12)

    def test_maxpool_time(self):
        x = np.zeros((1, 1, 3, 2))
        x[0, 0, :, 0] = [1.0, 5.0, 2.0]
        x[0, 0, :, 1] = [-3.0, -1.0, -2.0]
        y, _ = layer_forward(_layer(LayerSpec('maxpool-time')), x)
        np.testing.assert_array_equal(y, [[[5.0, -1.0]]])

    def test_film(self, rng):
        x = rng.standard_normal((2, 3, 4))
        gamma_hat = rng.standard_normal((2, 3))
        beta = rng.standard_normal((2, 3))
        y, _ = layer_forward(_layer(LayerSpec('film')), x, gamma_hat=gamma_hat, beta=beta)
        np.testing.assert_allclose(y, (1 + gamma_hat[:, :, None]) * x + beta[:, :, None])

    def test_film_needs_modulation(self, rng):
        with pytest.raises(ShapeError):
            layer_forward(_layer(LayerSpec('film')), rng.standard_normal((2, 3, 4)))

    def test_upsample_nearest(self):
        y, _ = layer_forward(_layer(LayerSpec('upsample-nearest')), np.array([[[1.0, 2.0]]]))
        np.testing.assert_array_equal(y, [[[1.0, 1.0, 2.0, 2.0]]])

    def test_dropout_eval_is_identity(self, rng):
        x = rng.standard_normal((4, 8))
        drop = _layer(LayerSpec('dropout', dropout_rate=0.5))
        y, _ = layer_forward(drop, x, EVAL)
        np.testing.assert_array_equal(y, x)

    def test_dropout_train_needs_rng(self, rng):
        drop = _layer(LayerSpec('dropout', dropout_rate=0.5))
        with pytest.raises(ConfigurationError):
            layer_forward(drop, rng.standard_normal((4, 8)), TRAIN)

    def test_batchnorm_running_stats(self, rng):
        bn = _layer(LayerSpec('batchnorm', 2))
        x = rng.standard_normal((64, 2, 5)) * 3.0 + 1.0
        y, _ = layer_forward(bn, x, TRAIN)
        np.testing.assert_allclose(y.mean(axis=(0, 2)), 0.0, atol=1e-10)
        np.testing.assert_allclose(bn.buffers['running_mean'], 0.1 * x.mean(axis=(0, 2)), rtol=1e-10)
        y_eval, _ = layer_forward(bn, x, EVAL)
        assert not np.allclose(y_eval, y)

    def test_invalid_mode(self, rng):
        with pytest.raises(ConfigurationError):
            layer_forward(_layer(LayerSpec('relu')), rng.standard_normal((2, 2)), 'predict')

    def test_backward_without_forward(self):
        with pytest.raises(GradientError):
            layer_backward(_layer(LayerSpec('relu')), None, np.ones((2, 2)))


class TestGradients:

    @pytest.mark.parametrize('spec, shape', [
        (LayerSpec('conv2d', 2, 3, 3), (2, 2, 5, 4)),
        (LayerSpec('conv2d', 2, 3, 3, stride=2), (2, 2, 5, 5)),
        (LayerSpec('conv1d-dilated', 2, 3, 3, dilation=2), (2, 2, 9)),
        (LayerSpec('conv1d-dilated', 2, 3, 3, stride=2), (2, 2, 9)),
        (LayerSpec('linear', 4, 3), (5, 4)),
        (LayerSpec('batchnorm', 3), (4, 3, 5)),
        (LayerSpec('relu'), (3, 7)),
        (LayerSpec('gelu'), (3, 7)),
        (LayerSpec('maxpool-time'), (2, 3, 6, 4)),
        (LayerSpec('dropout', dropout_rate=0.3), (4, 6)),
        (LayerSpec('upsample-nearest'), (2, 3, 5)),
    ])
    def test_layer_gradients(self, spec, shape, rng):
        layer = _layer(spec)
        x = rng.standard_normal(shape)
        assert grad_check(layer, x) < 1e-4

    def test_batchnorm_eval_gradients(self, rng):
        bn = _layer(LayerSpec('batchnorm', 3))
        bn.buffers['running_var'][...] = [0.5, 2.0, 1.5]
        assert grad_check(bn, rng.standard_normal((4, 3, 5)), mode=EVAL) < 1e-4

    def test_film_gradients(self, rng):
        film = _layer(LayerSpec('film'))
        x = rng.standard_normal((2, 3, 6))
        error = grad_check(film, x, gamma_hat=rng.standard_normal((2, 3)), beta=rng.standard_normal((2, 3)))
        assert error < 1e-4

    def test_l2_normalize_gradients(self, rng):
        u = rng.standard_normal((3, 5))
        upstream = rng.standard_normal((3, 5))
        _, cache = l2_normalize(u)
        analytic = l2_normalize_backward(cache, upstream)
        worst, _ = check_gradients(lambda: float((l2_normalize(u)[0] * upstream).sum()), {'u': u},
                                   {'u': analytic})
        assert worst < 1e-6

    def test_mlp_end_to_end(self, rng):
        net = mlp([4, 6, 3], rng, np.float64)
        x = rng.standard_normal((5, 4))
        upstream = rng.standard_normal((5, 3))
        _, cache = net.forward(x, TRAIN)
        _, grads = net.backward(cache, upstream)
        params = net.named_parameters()
        worst, _ = check_gradients(lambda: float((net.forward(x, TRAIN)[0] * upstream).sum()), params, grads)
        assert worst < 1e-4

    def test_gradient_check_requires_float64(self, rng):
        layer = build_layer(LayerSpec('linear', 4, 3), rng, np.float32)
        with pytest.raises(GradientError):
            grad_check(layer, rng.standard_normal((2, 4)).astype(np.float32))


class TestOptimizer:

    def test_lr_decay(self):
        schedule = LRSchedule(3e-4, 0.8, 10)
        assert lr_decay(schedule, 0) == 3e-4
        assert lr_decay(schedule, 9) == 3e-4
        assert lr_decay(schedule, 25) == pytest.approx(3e-4 * 0.64)

    def test_negative_epoch(self):
        with pytest.raises(ConfigurationError):
            lr_decay(LRSchedule(1e-3, 0.5, 1), -1)

    def test_first_adam_step_moves_by_learning_rate(self):
        params = {'w': np.array([1.0, -2.0, 0.5])}
        grads = {'w': np.array([0.3, -4.0, 1e-3])}
        state = OptimizerState(learning_rate=0.01)
        adam_step(state, params, grads)
        np.testing.assert_allclose(params['w'], [0.99, -1.99, 0.49], atol=1e-4)
        assert state.step == 1

    def test_non_finite_gradient(self):
        params = {'w': np.zeros(2)}
        with pytest.raises(GradientError, match="'w'"):
            adam_step(OptimizerState(1e-3), params, {'w': np.array([np.nan, 0.0])})
        np.testing.assert_array_equal(params['w'], 0.0)

    def test_adam_minimizes_quadratic(self):
        params = {'w': np.array([3.0, -2.0])}
        state = OptimizerState(learning_rate=0.05)
        for _ in range(500):
            adam_step(state, params, {'w': 2.0 * params['w']})
        np.testing.assert_allclose(params['w'], 0.0, atol=0.1)


class TestCheckpoint:

    def test_save_and_load(self, tmp_path, rng):
        net = mlp([3, 4, 2], rng)
        path = save_checkpoint(tmp_path / 'net.ckpt', net.state_dict(), {'kind': 'test', 'epochs': 3})
        tensors, metadata = load_checkpoint(path)
        assert metadata == {'kind': 'test', 'epochs': 3}
        restored = mlp([3, 4, 2], np.random.default_rng(99))
        restored.load_state_dict(tensors)
        for name, value in net.state_dict().items():
            np.testing.assert_array_equal(restored.state_dict()[name], value)

    def test_shape_mismatch(self, tmp_path, rng):
        path = save_checkpoint(tmp_path / 'net.ckpt', mlp([3, 4, 2], rng).state_dict(), {})
        tensors, _ = load_checkpoint(path)
        with pytest.raises(CheckpointError, match='shape'):
            mlp([3, 5, 2], rng).load_state_dict(tensors)

    def test_missing_tensor(self, rng):
        with pytest.raises(CheckpointError, match='missing'):
            mlp([3, 4, 2], rng).load_state_dict({})

    def test_corrupt_file(self, tmp_path):
        bad = tmp_path / 'bad.ckpt'
        bad.write_bytes(b'not a checkpoint')
        with pytest.raises(CheckpointError):
            load_checkpoint(bad)
        truncated = tmp_path / 'short.ckpt'
        truncated.write_bytes(b'SRIRCKPT\x01\x00\x00\x00\x05\x00')
        with pytest.raises(CheckpointError):
            load_checkpoint(truncated)
