"""Weight-normalized layers: init contracts, invariances, gradients."""

import numpy as np
import pytest

from hvaeood.autodiff import Tensor, finite_diff_check
from hvaeood.layers import DegenerateBatch, ResidualBlock, WeightNormDense

rng = np.random.default_rng(99)


def test_identity_configuration():
    # v = scaled identity columns; normalization divides the scale back out,
    # so g = 1 makes the effective weight exactly the identity.
    layer = WeightNormDense(3, 3)
    layer.v.data = np.eye(3) * 2.0
    layer.g.data = np.ones(3)
    layer.b.data = np.zeros(3)
    x = rng.normal(size=(5, 3))
    np.testing.assert_allclose(layer(Tensor(x)).data, x, atol=1e-12)


def test_zero_input_yields_bias():
    layer = WeightNormDense(4, 2)
    layer.init_data_dependent(Tensor(rng.normal(size=(8, 4))), rng)
    out = layer(Tensor(np.zeros((3, 4))))
    np.testing.assert_allclose(out.data, np.broadcast_to(layer.b.data, (3, 2)))


def test_dense_gradient_matches_finite_differences():
    layer = WeightNormDense(5, 4)
    layer.init_data_dependent(Tensor(rng.normal(size=(6, 5))), rng)
    x = rng.normal(size=(3, 5))
    err = finite_diff_check(lambda: layer(Tensor(x)).sum(), layer.parameters())
    assert err < 1e-4


def test_v_column_scaling_leaves_weight_unchanged():
    layer = WeightNormDense(6, 3)
    layer.init_data_dependent(Tensor(rng.normal(size=(10, 6))), rng)
    w_before = layer.effective_weight()
    layer.v.data[:, 1] *= 7.5
    w_after = layer.effective_weight()
    assert np.max(np.abs(w_after - w_before)) / np.max(np.abs(w_before)) < 1e-12


def test_data_dependent_init_postconditions():
    layer = WeightNormDense(9, 5)
    batch = rng.normal(size=(64, 9)) * 3 + 1
    out = layer.init_data_dependent(Tensor(batch), rng)
    means = out.data.mean(axis=0)
    variances = out.data.var(axis=0)
    assert np.max(np.abs(means)) < 1e-6
    assert np.all(variances > 0.999) and np.all(variances < 1.001)


def test_constant_batch_degenerate():
    layer = WeightNormDense(4, 2)
    batch = np.ones((16, 4))
    with pytest.raises(DegenerateBatch):
        layer.init_data_dependent(Tensor(batch), rng)


def test_single_row_batch_rejected():
    layer = WeightNormDense(4, 2)
    with pytest.raises(DegenerateBatch):
        layer.init_data_dependent(Tensor(np.zeros((1, 4))), rng)


def test_two_init_batches_differ():
    layer_a = WeightNormDense(6, 4)
    layer_b = WeightNormDense(6, 4)
    shared = np.random.default_rng(5)
    layer_a.init_data_dependent(Tensor(rng.normal(size=(32, 6))), np.random.default_rng(5))
    layer_b.init_data_dependent(Tensor(rng.normal(size=(32, 6))), np.random.default_rng(5))
    # same v draw (same rng seed), different batches -> different g
    assert np.max(np.abs(layer_a.g.data - layer_b.g.data)) > 1e-6


def test_residual_block_identity_at_zero_weights():
    block = ResidualBlock(5)
    block.init_data_dependent(Tensor(rng.normal(size=(12, 5))), rng)
    block.first.g.data[:] = 0.0
    block.first.b.data[:] = 0.0
    block.second.g.data[:] = 0.0
    block.second.b.data[:] = 0.0
    x = rng.normal(size=(7, 5))
    np.testing.assert_allclose(block(Tensor(x)).data, x, atol=1e-15)


def test_residual_block_gradients():
    block = ResidualBlock(4)
    block.init_data_dependent(Tensor(rng.normal(size=(10, 4))), rng)
    x = rng.normal(size=(3, 4))
    err = finite_diff_check(lambda: (block(Tensor(x)) ** 2).sum(), block.parameters())
    assert err < 1e-4
