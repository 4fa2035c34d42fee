"""Kernel-level checks with hand-computed expected values."""

from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from anomseg.errors import ParameterError, ShapeError
from anomseg.numcore import Tensor, functional as F

E = math.e


class TestSoftmax:

    def test_two_zeros(self):
        out = F.softmax(Tensor([0.0, 0.0]))
        np.testing.assert_allclose(out.data, [0.5, 0.5], atol=1e-12)

    def test_one_zero_pair(self):
        # softmax([1, 0]) = [e, 1] / (e + 1)
        out = F.softmax(Tensor([1.0, 0.0]))
        np.testing.assert_allclose(out.data, [E / (E + 1), 1 / (E + 1)], atol=1e-12)

    def test_temperature_sharpens(self):
        hot = F.softmax(Tensor([1.0, 0.0]), temperature=0.1)
        assert hot.data[0] > 0.999
        np.testing.assert_allclose(hot.data[0], math.exp(10) / (math.exp(10) + 1),
                                   rtol=1e-12)

    def test_temperature_must_be_positive(self):
        with pytest.raises(ParameterError):
            F.softmax(Tensor([1.0]), temperature=0.0)

    @given(st.lists(st.floats(min_value=-1e3, max_value=1e3), min_size=1,
                    max_size=16))
    @settings(max_examples=60, deadline=None)
    def test_rows_sum_to_one(self, logits):
        out = F.softmax(Tensor(np.array(logits)))
        assert abs(out.data.sum() - 1.0) < 1e-9

    def test_shift_invariance(self):
        x = np.array([3.0, -1.0, 0.5])
        a = F.softmax(Tensor(x)).data
        b = F.softmax(Tensor(x + 500.0)).data
        np.testing.assert_allclose(a, b, atol=1e-12)


class TestLogSoftmaxCrossEntropy:

    def test_uniform_logits_give_log_vocab(self):
        v = 7
        ls = F.log_softmax(Tensor(np.zeros(v)))
        np.testing.assert_allclose(ls.data, np.full(v, -math.log(v)), atol=1e-12)

    def test_two_logit_ce_gradient(self):
        # softmax CE of logits [0, 0] against class 0: grad = p - onehot
        logits = Tensor(np.zeros((1, 2)), requires_grad=True)
        nll = -F.take_flat(F.log_softmax(logits, axis=-1), np.array([0]))
        nll.sum().backward()
        np.testing.assert_allclose(logits.grad, [[-0.5, 0.5]], atol=1e-12)


class TestLayerNorm:

    def test_constant_input_returns_bias(self):
        x = Tensor(np.full((2, 5), 3.0))
        gain = Tensor(np.ones(5))
        bias = Tensor(np.arange(5.0))
        out = F.layer_norm(x, gain, bias)
        np.testing.assert_allclose(out.data, np.tile(np.arange(5.0), (2, 1)),
                                   atol=1e-6)

    def test_output_mean_zero_unit_var(self, rng):
        x = Tensor(rng.normal(size=(4, 16)))
        out = F.layer_norm(x, Tensor(np.ones(16)), Tensor(np.zeros(16)))
        np.testing.assert_allclose(out.data.mean(-1), 0.0, atol=1e-10)
        np.testing.assert_allclose(out.data.var(-1), 1.0, atol=1e-3)


class TestBilinearSample:

    def test_four_cell_midpoint(self):
        grid = Tensor(np.array([[0.0, 1.0], [2.0, 3.0]]).reshape(2, 2, 1))
        out = F.bilinear_sample(grid, np.array([[0.5, 0.5]]))
        np.testing.assert_allclose(out.data, [[1.5]])

    def test_integer_coordinates_exact(self, rng):
        grid = Tensor(rng.normal(size=(5, 4, 3)))
        pts = np.array([[0, 0], [4, 3], [2, 1]], dtype=float)
        out = F.bilinear_sample(grid, pts)
        np.testing.assert_array_equal(out.data[0], grid.data[0, 0])
        np.testing.assert_array_equal(out.data[1], grid.data[4, 3])
        np.testing.assert_array_equal(out.data[2], grid.data[2, 1])

    def test_constant_grid_constant_output(self, rng):
        grid = Tensor(np.full((6, 6, 2), 0.7))
        pts = rng.uniform(-2, 8, size=(20, 2))
        out = F.bilinear_sample(grid, pts)
        np.testing.assert_allclose(out.data, 0.7, atol=1e-12)

    def test_out_of_range_clamps_to_border(self):
        grid = Tensor(np.arange(4.0).reshape(2, 2, 1))
        out = F.bilinear_sample(grid, np.array([[-5.0, -5.0], [9.0, 9.0]]))
        np.testing.assert_allclose(out.data[:, 0], [0.0, 3.0])

    def test_batched_matches_loop(self, rng):
        grids = rng.normal(size=(3, 4, 4, 2))
        pts = rng.uniform(0, 3, size=(3, 7, 2))
        batched = F.bilinear_sample(Tensor(grids), pts)
        for b in range(3):
            single = F.bilinear_sample(Tensor(grids[b]), pts[b])
            np.testing.assert_allclose(batched.data[b], single.data, atol=1e-12)


class TestConv2d:

    def test_identity_kernel(self, rng):
        x = Tensor(rng.normal(size=(1, 5, 5, 2)))
        w = np.zeros((1, 1, 2, 2))
        w[0, 0] = np.eye(2)
        out = F.conv2d(x, Tensor(w), stride=1, padding=0)
        np.testing.assert_allclose(out.data, x.data, atol=1e-12)

    def test_matches_naive_loops(self, rng):
        x = rng.normal(size=(2, 6, 7, 3))
        w = rng.normal(size=(3, 3, 3, 4))
        out = F.conv2d(Tensor(x), Tensor(w), stride=2, padding=1)
        xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
        ho, wo = out.shape[1], out.shape[2]
        ref = np.zeros((2, ho, wo, 4))
        for b in range(2):
            for i in range(ho):
                for j in range(wo):
                    patch = xp[b, 2 * i:2 * i + 3, 2 * j:2 * j + 3]
                    ref[b, i, j] = np.tensordot(patch, w, axes=3)
        np.testing.assert_allclose(out.data, ref, atol=1e-10)

    def test_kernel_larger_than_input_rejected(self):
        with pytest.raises(ShapeError):
            F.conv2d(Tensor(np.ones((1, 2, 2, 1))), Tensor(np.ones((5, 5, 1, 1))))


class TestPooling:

    def test_adaptive_pool_averages_blocks(self):
        x = np.arange(16.0).reshape(1, 4, 4, 1)
        out = F.adaptive_avg_pool(Tensor(x), (2, 2))
        np.testing.assert_allclose(out.data.reshape(2, 2),
                                   [[2.5, 4.5], [10.5, 12.5]])

    def test_indivisible_target_rejected(self):
        with pytest.raises(ShapeError):
            F.adaptive_avg_pool(Tensor(np.ones((1, 4, 4, 1))), (3, 3))

    def test_global_pool_equals_mean(self, rng):
        x = rng.normal(size=(2, 3, 5, 4))
        out = F.global_avg_pool(Tensor(x))
        np.testing.assert_allclose(out.data, x.mean(axis=(1, 2)), atol=1e-12)


class TestStructureOps:

    def test_concat_and_backward(self, rng):
        a = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
        b = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
        out = F.concat([a, b], axis=0)
        assert out.shape == (6, 3)
        (out * out).sum().backward()
        np.testing.assert_allclose(a.grad, 2 * a.data)
        np.testing.assert_allclose(b.grad, 2 * b.data)

    def test_narrow_roundtrip(self, rng):
        x = Tensor(rng.normal(size=(5, 4)), requires_grad=True)
        mid = F.narrow(x, 0, 1, 3)
        np.testing.assert_array_equal(mid.data, x.data[1:4])
        mid.sum().backward()
        expected = np.zeros((5, 4))
        expected[1:4] = 1.0
        np.testing.assert_array_equal(x.grad, expected)

    def test_take_rows_duplicate_indices_accumulate(self):
        table = Tensor(np.arange(6.0).reshape(3, 2), requires_grad=True)
        out = F.take_rows(table, np.array([1, 1, 2]))
        out.sum().backward()
        np.testing.assert_array_equal(table.grad, [[0, 0], [2, 2], [1, 1]])

    def test_take_flat_out_of_range(self):
        with pytest.raises(ShapeError):
            F.take_flat(Tensor(np.ones(3)), np.array([5]))

    def test_upsample_preserves_constant(self):
        x = Tensor(np.full((4, 4), 0.25))
        up = F.upsample_bilinear(x, (16, 16))
        assert up.shape == (16, 16)
        np.testing.assert_allclose(up.data, 0.25, atol=1e-12)
