"""
Tests for layer forward passes, batch norm and finite-difference gradient checks.
"""
import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from bnplab.errors import BatchSizeError, ShapeError
from bnplab.layers import (
    Activation,
    BatchNormLayer,
    Conv2dLayer,
    DenseLayer,
    FlattenLayer,
    MaxPool2dLayer,
    NormMode,
    bn_forward,
    conv2d_same,
    conv_forward,
    dense_forward,
)
from bnplab.linalg import make_rng
from bnplab.network import Network, dense_layer


def test_dense_relu_identity():
    layer = DenseLayer(W=np.eye(2), b=np.zeros(2))
    out = dense_forward(layer, np.array([[-1.0, 2.0]]), Activation.RELU)
    assert_array_equal(out, [[0.0, 2.0]])
    assert_array_equal(layer.cached_input, [[-1.0, 2.0]])


def test_activation_override_leaves_layer_unchanged():
    layer = DenseLayer(W=np.eye(2), b=np.zeros(2))
    out = dense_forward(layer, np.array([[-1.0, 2.0]]), Activation.NONE)
    assert_array_equal(out, [[-1.0, 2.0]])
    assert layer.activation is Activation.RELU
    assert_array_equal(layer.forward(np.array([[-1.0, 2.0]])), [[0.0, 2.0]])


def test_dense_zero_weights_give_bias():
    c = np.array([1.5, -2.0, 0.25])
    layer = DenseLayer(W=np.zeros((3, 4)), b=c, activation=Activation.NONE)
    out = dense_forward(layer, make_rng(0).standard_normal((5, 4)))
    assert_array_equal(out, np.tile(c, (5, 1)))


def test_dense_matches_per_example_loop():
    rng = make_rng(1)
    layer = DenseLayer(W=rng.standard_normal((3, 4)), b=rng.standard_normal(3))
    x = rng.standard_normal((6, 4))
    expected = np.array([np.maximum(layer.W @ h + layer.b, 0.0) for h in x])
    assert_allclose(layer.forward(x), expected, atol=1e-12)


def test_dense_shape_mismatch():
    layer = DenseLayer(W=np.zeros((3, 4)), b=np.zeros(3))
    with pytest.raises(ShapeError):
        layer.forward(np.zeros((2, 5)))


def _naive_conv(x, w, b):
    n, r, s, c = x.shape
    k = w.shape[0]
    p = (k - 1) // 2
    xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
    out = np.zeros((n, r, s, w.shape[3]))
    for i in range(r):
        for j in range(s):
            patch = xp[:, i:i + k, j:j + k, :]
            out[:, i, j, :] = np.einsum("nabc,abcd->nd", patch, w) + b
    return out


def test_conv_one_by_one_identity():
    layer = Conv2dLayer(w=np.ones((1, 1, 1, 1)), b=np.zeros(1), activation=Activation.NONE)
    x = make_rng(2).standard_normal((2, 4, 3, 1))
    assert_allclose(conv_forward(layer, x), x)


def test_conv_activation_override_is_local():
    layer = Conv2dLayer(w=-np.ones((1, 1, 1, 1)), b=np.zeros(1), activation=Activation.NONE)
    x = np.ones((1, 2, 2, 1))
    assert_array_equal(conv_forward(layer, x, Activation.RELU), np.zeros((1, 2, 2, 1)))
    assert layer.activation is Activation.NONE
    assert_array_equal(conv_forward(layer, x), -x)


def test_conv_zero_input_gives_bias():
    layer = Conv2dLayer(w=make_rng(3).standard_normal((3, 3, 2, 4)), b=np.arange(4.0), activation=Activation.NONE)
    out = layer.forward(np.zeros((1, 5, 5, 2)))
    assert_allclose(out, np.broadcast_to(np.arange(4.0), (1, 5, 5, 4)))


def test_conv_matches_naive_and_keeps_shape():
    rng = make_rng(4)
    for k in (1, 3, 5):
        w, b = rng.standard_normal((k, k, 3, 2)), rng.standard_normal(2)
        x = rng.standard_normal((2, 6, 5, 3))
        out = conv2d_same(x, w) + b
        assert out.shape == (2, 6, 5, 2)
        assert_allclose(out, _naive_conv(x, w, b), atol=1e-12)


def test_conv_even_kernel_rejected():
    with pytest.raises(ShapeError):
        Conv2dLayer(w=np.zeros((2, 2, 1, 1)), b=np.zeros(1))
    with pytest.raises(ShapeError):
        conv2d_same(np.zeros((1, 4, 4, 1)), np.zeros((4, 4, 1, 1)))


def test_bn_standardized_input_unchanged():
    x = make_rng(5).standard_normal((20, 3))
    x = (x - x.mean(axis=0)) / x.std(axis=0)
    layer = BatchNormLayer(num_features=3, eps=0.0)
    assert_allclose(bn_forward(layer, x), x, atol=1e-12)


def test_bn_zero_gamma_gives_beta():
    layer = BatchNormLayer(num_features=2, gamma=np.zeros(2), beta=np.array([0.5, -1.0]))
    out = layer.forward(make_rng(6).standard_normal((8, 2)))
    assert_allclose(out, np.tile([0.5, -1.0], (8, 1)))


def test_bn_batch_statistics():
    x = make_rng(7).standard_normal((50, 4)) * 3.0 + 2.0
    eps = 1e-3
    layer = BatchNormLayer(num_features=4, eps=eps)
    out = layer.forward(x)
    var = x.var(axis=0)
    assert np.abs(out.mean(axis=0)).max() <= 1e-10
    assert_allclose(out.var(axis=0), var / (var + eps), atol=1e-8)


def test_bn_running_stats_and_infer_mode():
    x = make_rng(8).standard_normal((10, 2)) + 1.0
    layer = BatchNormLayer(num_features=2, rho=0.9)
    layer.forward(x)
    assert_allclose(layer.running_mu, 0.1 * x.mean(axis=0))
    assert_allclose(layer.running_sigma2, 0.9 + 0.1 * x.var(axis=0))
    layer.mode = NormMode.INFER
    single = layer.forward(x[:1])
    expected = (x[:1] - layer.running_mu) / np.sqrt(layer.running_sigma2 + layer.eps)
    assert_allclose(single, expected)


def test_bn_batch_size_one_refused():
    layer = BatchNormLayer(num_features=3)
    with pytest.raises(BatchSizeError, match="BN undefined at batch size 1"):
        layer.forward(np.zeros((1, 3)))


def test_bn_conv_input_per_channel():
    x = make_rng(9).standard_normal((3, 4, 5, 2)) * np.array([1.0, 10.0]) + np.array([0.0, 5.0])
    out = BatchNormLayer(num_features=2, eps=0.0).forward(x)
    assert_allclose(out.mean(axis=(0, 1, 2)), [0.0, 0.0], atol=1e-12)
    assert_allclose(out.var(axis=(0, 1, 2)), [1.0, 1.0], atol=1e-10)


def test_maxpool_forward_backward():
    x = np.arange(16.0).reshape(1, 4, 4, 1)
    pool = MaxPool2dLayer(2)
    out = pool.forward(x)
    assert_array_equal(out[0, :, :, 0], [[5.0, 7.0], [13.0, 15.0]])
    grad = pool.backward(np.ones((1, 2, 2, 1)))
    expected = np.zeros((4, 4))
    expected[[1, 1, 3, 3], [1, 3, 1, 3]] = 1.0
    assert_array_equal(grad[0, :, :, 0], expected)


def test_maxpool_odd_size_drops_trailing_row():
    x = make_rng(10).standard_normal((2, 5, 4, 3))
    pool = MaxPool2dLayer(2)
    assert pool.forward(x).shape == (2, 2, 2, 3)
    assert pool.backward(np.ones((2, 2, 2, 3))).shape == x.shape


# Gradient checks against central differences

def _fd_gradient(network, x, labels, layer, name, step=1e-5):
    param = getattr(layer, name)
    grad = np.zeros_like(param)
    for idx in np.ndindex(param.shape):
        original = param[idx]
        param[idx] = original + step
        plus = network.loss(x, labels)
        param[idx] = original - step
        minus = network.loss(x, labels)
        param[idx] = original
        grad[idx] = (plus - minus) / (2 * step)
    return grad


def _assert_gradients_match(network, x, labels, tol=1e-6):
    network.forward(x, update_running=False)
    bundle = network.backward(labels)
    for i, layer in network.parameter_layers():
        for name in layer.params():
            fd = _fd_gradient(network, x, labels, layer, name)
            analytic = bundle[i][name]
            err = np.linalg.norm(analytic - fd) / max(np.linalg.norm(fd), 1e-12)
            assert err <= tol, f"layer {i} {name}: relative error {err}"


def test_mlp_gradients_match_finite_differences():
    rng = make_rng(11)
    network = Network([dense_layer(rng, 5, 6, Activation.RELU), dense_layer(rng, 6, 3, Activation.NONE)], 3)
    network.layers[0].b = rng.normal(0.0, 0.3, size=6)
    x = rng.standard_normal((8, 5))
    _assert_gradients_match(network, x, rng.integers(0, 3, size=8))


def test_conv_gradients_match_finite_differences():
    rng = make_rng(12)
    conv = Conv2dLayer(w=rng.normal(0.0, 0.3, size=(3, 3, 2, 3)), b=rng.normal(0.0, 0.1, size=3))
    network = Network([conv, FlattenLayer(), dense_layer(rng, 4 * 5 * 3, 4, Activation.NONE)], 4)
    x = rng.standard_normal((2, 4, 5, 2))
    _assert_gradients_match(network, x, rng.integers(0, 4, size=2))


def test_batchnorm_gradients_match_finite_differences():
    rng = make_rng(13)
    bn = BatchNormLayer(num_features=4, eps=1e-3, gamma=rng.uniform(0.5, 1.5, 4), beta=rng.normal(0.0, 0.1, 4))
    network = Network(
        [dense_layer(rng, 3, 4, Activation.NONE), bn, dense_layer(rng, 4, 3, Activation.NONE)], 3
    )
    x = rng.standard_normal((6, 3))
    _assert_gradients_match(network, x, rng.integers(0, 3, size=6))


def test_stop_gradient_bn_treats_stats_as_constants():
    rng = make_rng(14)
    x = rng.standard_normal((5, 3))
    d_out = rng.standard_normal((5, 3))
    layer = BatchNormLayer(num_features=3, eps=0.0, stop_grad_stats=True, affine=False)
    layer.forward(x)
    assert_allclose(layer.backward(d_out), d_out / x.std(axis=0))
