"""Attention, dilated convolution, the two-layer perceptron, and the
regularized transport solver."""

import numpy as np
import pytest

from seqnp.engine import DimensionError, Tensor, grad_check, tsum
from seqnp.numerics import (conv_out_len, dilated_conv, mlp2,
                            pairwise_sq_dists, sdpa, sinkhorn, sinkhorn_value)


class TestSdpa:
    def test_two_key_hand_value(self):
        out = sdpa(np.array([1.0]), np.array([[1.0], [-1.0]]),
                   np.array([[2.0], [0.0]]))
        # softmax([1, -1]) mixes the values to 2 * logistic(2)
        expected = 2.0 / (1.0 + np.exp(-2.0))
        assert abs(out.data[0] - expected) < 1e-12
        assert abs(out.data[0] - 1.7615941559557646) < 1e-12

    def test_single_key_passes_value_through(self, rng):
        k = rng.normal(size=(1, 3))
        v = rng.normal(size=(1, 4))
        out = sdpa(rng.normal(size=3), k, v)
        assert np.allclose(out.data, v[0], atol=1e-15)

    def test_zero_query_mixes_uniformly(self, rng):
        v = rng.normal(size=(5, 2))
        out = sdpa(np.zeros(3), rng.normal(size=(5, 3)), v)
        assert np.allclose(out.data, v.mean(axis=0), atol=1e-12)

    def test_weights_are_row_stochastic(self, rng):
        _, w = sdpa(rng.normal(size=(4, 3)), rng.normal(size=(6, 3)),
                    rng.normal(size=(6, 2)), return_weights=True)
        assert w.shape == (4, 6)
        assert np.allclose(w.data.sum(axis=1), 1.0, atol=1e-12)
        assert (w.data > 0).all()

    def test_width_mismatch_raises(self, rng):
        with pytest.raises(DimensionError):
            sdpa(rng.normal(size=(2, 3)), rng.normal(size=(4, 2)),
                 rng.normal(size=(4, 2)))


class TestDilatedConv:
    def test_dense_hand_case(self):
        p = np.array([[1.0], [2.0], [3.0]])
        kernel = np.ones((2, 1, 1))
        out = dilated_conv(p, kernel, 0)
        assert np.allclose(out.data, [[3.0], [5.0]])

    def test_gap_one_hand_case(self):
        p = np.array([[1.0], [2.0], [3.0]])
        kernel = np.ones((2, 1, 1))
        out = dilated_conv(p, kernel, 1)
        # taps read positions t and t+2: only 1+3 fits
        assert np.allclose(out.data, [[4.0]])

    def test_unit_kernel_selects_coordinate(self, rng):
        p = rng.normal(size=(5, 3))
        kernel = np.zeros((1, 3, 1))
        kernel[0, 0, 0] = 1.0
        out = dilated_conv(p, kernel, 2)
        assert np.allclose(out.data[:, 0], p[:, 0], atol=1e-15)

    def test_oversized_kernel_raises(self):
        with pytest.raises(DimensionError):
            dilated_conv(np.zeros((3, 2)), np.zeros((3, 2, 1)), 1)

    def test_out_len_formula(self):
        assert conv_out_len(5, 3, 0) == 3
        assert conv_out_len(5, 3, 1) == 1
        assert conv_out_len(5, 1, 2) == 5

    def test_gradient(self, rng):
        p = rng.normal(size=(6, 2))
        k = rng.normal(size=(2, 2, 3))
        err = grad_check(lambda ts: tsum(dilated_conv(ts[0], ts[1], 1)),
                         [p, k])
        assert err < 1e-6


class TestMlp2:
    def test_scalar_hand_cases(self):
        one = np.ones((1, 1))
        args = (one, np.zeros(1), 2.0 * one, np.ones(1))
        assert mlp2(np.array([[3.0]]), *args).data[0, 0] == pytest.approx(7.0)
        # negative input dies at the hidden relu, leaving only the bias
        assert mlp2(np.array([[-1.0]]), *args).data[0, 0] == pytest.approx(1.0)

    def test_all_zero_parameters_give_zero(self, rng):
        z = np.zeros((4, 4))
        out = mlp2(rng.normal(size=(2, 4)), z, np.zeros(4), z, np.zeros(4))
        assert not out.data.any()


class TestSinkhorn:
    def test_point_mass_cost_is_the_value(self):
        value = sinkhorn_value(np.array([1.0]), np.array([1.0]),
                               Tensor(np.array([[1.0]])), lam=0.05, iters=50)
        assert value.data == pytest.approx(1.0, abs=1e-9)

    def test_self_transport_stays_near_diagonal(self, rng):
        # entropic smearing bounds the self-cost by roughly lam * log n
        n = 6
        x = rng.normal(size=(n, 3))
        cost = ((x[:, None, :] - x[None, :, :]) ** 2).sum(axis=2)
        w = np.full(n, 1.0 / n)
        value = sinkhorn_value(w, w, Tensor(cost), lam=0.05, iters=200)
        assert 0.0 <= value.data <= 0.05 * np.log(n) + 1e-6

    def test_transpose_symmetry(self, rng):
        a = rng.random(4)
        a /= a.sum()
        b = rng.random(5)
        b /= b.sum()
        cost = rng.random((4, 5))
        v1 = sinkhorn_value(a, b, Tensor(cost), lam=0.1, iters=150)
        v2 = sinkhorn_value(b, a, Tensor(cost.T.copy()), lam=0.1, iters=150)
        assert abs(v1.data - v2.data) < 1e-9

    def test_scalings_converge_to_the_marginals(self, rng):
        a = rng.random(4)
        a /= a.sum()
        b = rng.random(3)
        b /= b.sum()
        res = sinkhorn(a, b, rng.random((4, 3)), lam=0.1, iters=300)
        assert res.converged
        assert res.marginal_error < 1e-6

    def test_solver_paths_agree(self, rng):
        # the float solver and the tape-unrolled solver run the same
        # iteration; their values should match closely
        a = np.full(5, 0.2)
        cost = rng.random((5, 5))
        res = sinkhorn(a, a, cost, lam=0.08, iters=200)
        val = sinkhorn_value(a, a, Tensor(cost), lam=0.08, iters=200)
        assert abs(res.value - float(val.data)) < 1e-8

    def test_bad_weights_rejected(self):
        with pytest.raises(ValueError):
            sinkhorn(np.array([0.5, 0.6]), np.array([0.5, 0.5]),
                     np.zeros((2, 2)), lam=0.1, iters=10)
        with pytest.raises(ValueError):
            sinkhorn(np.array([1.1, -0.1]), np.array([0.5, 0.5]),
                     np.zeros((2, 2)), lam=0.1, iters=10)


def test_pairwise_sq_dists_matches_numpy(rng):
    x = rng.normal(size=(5, 3))
    y = rng.normal(size=(4, 3))
    expected = ((x[:, None, :] - y[None, :, :]) ** 2).sum(axis=2)
    got = pairwise_sq_dists(Tensor(x), Tensor(y))
    assert np.allclose(got.data, expected, atol=1e-12)
    assert (got.data >= 0).all()


def test_pairwise_sq_dists_width_mismatch(rng):
    with pytest.raises(DimensionError):
        pairwise_sq_dists(Tensor(rng.normal(size=(2, 3))),
                          Tensor(rng.normal(size=(2, 4))))
