"""
Tests for the lowered convolution matrix, window statistics and the conv neuron Hessian.
"""
import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from bnplab.checks import worked_example_matrix
from bnplab.errors import BnpLabError, ShapeError
from bnplab.hessian import (
    assemble_conv_hessian,
    cnn_lower,
    cnn_stats,
    conv_curvature_blocks,
    finite_difference_hessian,
    lowered_weight,
    neuron_loss_fn,
    vec_channel,
    window_mean_bound,
)
from bnplab.layers import Activation, Conv2dLayer, FlattenLayer
from bnplab.linalg import make_rng
from bnplab.network import Network, dense_layer


@pytest.mark.parametrize("k", [1, 3, 5])
def test_lowered_matrix_reproduces_convolution(k):
    rng = make_rng(k)
    x = rng.uniform(-1.0, 1.0, size=(2, 6, 5, 3))
    layer = Conv2dLayer(w=rng.uniform(-1.0, 1.0, size=(k, k, 3, 2)), b=rng.uniform(-1.0, 1.0, size=2),
                        activation=Activation.NONE)
    out = layer.pre_activation(x)
    lowered = cnn_lower(x, k)
    assert lowered.Hcal_hat.shape == (2 * 6 * 5, 1 + 3 * k * k)
    for d in range(2):
        assert_allclose(lowered.Hcal_hat @ lowered_weight(layer.w, layer.b, d), vec_channel(out, d), atol=1e-12)


def test_worked_example_layout():
    a, b = np.meshgrid(np.arange(1, 5), np.arange(1, 4), indexing="ij")
    x = (10.0 * a + b).reshape(1, 4, 3, 1)
    assert_array_equal(cnn_lower(x, 3).Hcal, worked_example_matrix())


def test_lower_rejects_bad_input():
    with pytest.raises(ShapeError):
        cnn_lower(np.zeros((4, 4, 1)), 3)
    with pytest.raises(ShapeError):
        cnn_lower(np.zeros((1, 4, 4, 1)), 2)


def test_vec_channel_is_column_major_per_example():
    a = np.arange(12.0).reshape(1, 2, 3, 2)
    assert_array_equal(vec_channel(a, 0), [0.0, 6.0, 2.0, 8.0, 4.0, 10.0])


def test_approx_stats_are_channel_moments():
    x = make_rng(1).uniform(size=(3, 7, 6, 2))
    mu, var = cnn_stats(x, 3)
    assert_allclose(mu, x.mean(axis=(0, 1, 2)))
    assert_allclose(var, x.var(axis=(0, 1, 2)))


def test_exact_stats_center_entry_matches_approx_for_1x1():
    x = make_rng(2).uniform(size=(2, 5, 5, 3))
    exact_mu, exact_var = cnn_stats(x, 1, mode="exact")
    approx_mu, approx_var = cnn_stats(x, 1)
    assert exact_mu.shape == (1, 1, 3)
    assert_allclose(exact_mu[0, 0], approx_mu)
    assert_allclose(exact_var[0, 0], approx_var)


def test_exact_window_means_respect_bound():
    rng = make_rng(3)
    for r, s, k in [(9, 9, 3), (10, 6, 5)]:
        x = rng.uniform(0.0, 2.0, size=(2, r, s, 2))
        exact_mu, _ = cnn_stats(x, k, mode="exact")
        approx_mu, _ = cnn_stats(x, k)
        assert exact_mu.shape == (k, k, 2)
        assert np.all(np.abs(exact_mu - approx_mu) <= window_mean_bound(x, k) * (1.0 + 1e-12))


def test_corner_kernel_entry_sees_padding():
    x = np.ones((1, 3, 3, 1))
    exact_mu, _ = cnn_stats(x, 3, mode="exact")
    assert exact_mu[1, 1, 0] == 1.0
    assert exact_mu[0, 0, 0] == pytest.approx(4.0 / 9.0)


def test_exact_stats_index_kernel_row_then_column():
    x = np.repeat(np.arange(3.0), 3).reshape(1, 3, 3, 1)
    exact_mu, _ = cnn_stats(x, 3, mode="exact")
    assert exact_mu[0, 1, 0] == pytest.approx(1.0 / 3.0)
    assert exact_mu[2, 1, 0] == pytest.approx(1.0)
    assert exact_mu[1, 0, 0] == pytest.approx(2.0 / 3.0)


def test_stats_mode_validated():
    with pytest.raises(ShapeError):
        cnn_stats(np.zeros((1, 3, 3, 1)), 3, mode="median")


def _linear_conv_network(rng, r=4, s=3, c_in=2, c_out=2, classes=4):
    conv = Conv2dLayer(w=rng.uniform(-0.5, 0.5, size=(3, 3, c_in, c_out)), b=rng.normal(0.0, 0.1, size=c_out),
                       activation=Activation.NONE)
    return Network([conv, FlattenLayer(), dense_layer(rng, r * s * c_out, classes, Activation.NONE)], classes)


def test_conv_neuron_hessian_matches_finite_differences():
    rng = make_rng(4)
    network = _linear_conv_network(rng)
    x = rng.standard_normal((2, 4, 3, 2))
    labels = np.array([1, 3])
    hess = assemble_conv_hessian(cnn_lower(x, 3), conv_curvature_blocks(network, x, labels, 0, 0))
    f, theta = neuron_loss_fn(network, x, labels, 0, 0)
    fd = finite_difference_hessian(f, theta, step=1e-3)
    assert np.abs(hess - fd).max() / np.abs(fd).max() <= 1e-5


def test_conv_curvature_needs_linear_conv_head():
    rng = make_rng(5)
    network = _linear_conv_network(rng)
    network.layers[0].activation = Activation.RELU
    with pytest.raises(BnpLabError):
        conv_curvature_blocks(network, np.zeros((1, 4, 3, 2)), np.array([0]), 0, 0)


def test_assemble_conv_hessian_checks_block_shape():
    lowered = cnn_lower(np.zeros((2, 3, 3, 1)), 3)
    with pytest.raises(ShapeError):
        assemble_conv_hessian(lowered, np.zeros((2, 4, 4)))
