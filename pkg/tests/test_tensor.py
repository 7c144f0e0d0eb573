"""Forward/backward behavior of the autodiff kernels."""

import math

import numpy as np
import pytest

from plasticnet import gradcheck
from plasticnet import tensor as T
from plasticnet.errors import DimensionError, InputError


def tensor(data, grad=True):
    return T.Tensor(np.array(data, dtype=np.float64), requires_grad=grad)


class TestMatmul:
    def test_identity(self):
        a = tensor(np.eye(2))
        b = tensor([[1.0, 2.0], [3.0, 4.0]])
        assert np.array_equal(T.matmul(a, b).data, [[1.0, 2.0], [3.0, 4.0]])

    def test_hand_arithmetic(self):
        a = tensor([[1.0, 0.0], [0.0, 0.0]])
        b = tensor([[5.0, 6.0], [7.0, 8.0]])
        assert np.array_equal(T.matmul(a, b).data, [[5.0, 6.0], [0.0, 0.0]])

    def test_grad_of_sum_against_finite_differences(self):
        # d/dA sum(A @ B) at A = ones, B = diag(2, 2).
        a = tensor(np.ones((2, 2)))
        b = tensor([[2.0, 0.0], [0.0, 2.0]])
        T.weighted_sum(T.matmul(a, b), np.ones((2, 2))).backward()
        numeric = gradcheck.numeric_gradient(
            lambda: float((a.data @ b.data).sum()), a.data)
        assert np.allclose(a.grad, [[2.0, 2.0], [2.0, 2.0]])
        assert gradcheck.max_rel_error(a.grad, numeric) < 1e-4

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            T.matmul(tensor(np.ones((2, 3))), tensor(np.ones((2, 3))))


class TestConv2d:
    def test_identity_kernel(self):
        x = tensor(np.ones((1, 1, 3, 3)))
        w = tensor(np.ones((1, 1, 1, 1)))
        out = T.conv2d(x, w)
        assert out.shape == (1, 1, 3, 3)
        assert np.array_equal(out.data, np.ones((1, 1, 3, 3)))

    def test_hand_arithmetic(self):
        x = tensor([[[[1.0, 2.0], [3.0, 4.0]]]])
        w = tensor([[[[1.0, 0.0], [0.0, 1.0]]]])
        out = T.conv2d(x, w)
        assert out.shape == (1, 1, 1, 1)
        assert out.data[0, 0, 0, 0] == 5.0

    def test_kernel_grad_matches_finite_differences(self):
        rng = np.random.default_rng(3)
        x = tensor(rng.standard_normal((4, 2, 5, 5)), grad=False)
        w = tensor(rng.standard_normal((3, 2, 3, 3)))
        coeffs = rng.standard_normal((4, 3, 3, 3))

        def loss():
            return float((T.conv2d(x, w).data * coeffs).sum())

        T.weighted_sum(T.conv2d(x, w), coeffs).backward()
        numeric = gradcheck.numeric_gradient(loss, w.data)
        assert gradcheck.max_rel_error(w.grad, numeric) < 1e-4

    def test_channel_mismatch(self):
        with pytest.raises(DimensionError):
            T.conv2d(tensor(np.ones((1, 2, 4, 4))), tensor(np.ones((1, 3, 3, 3))))

    def test_kernel_larger_than_padded_input(self):
        with pytest.raises(DimensionError):
            T.conv2d(tensor(np.ones((1, 1, 2, 2))), tensor(np.ones((1, 1, 5, 5))))


class TestBatchNorm:
    def test_constant_channel_maps_to_zero(self):
        x = tensor(np.full((6, 3), 4.2))
        gamma, beta = tensor(np.ones(3)), tensor(np.zeros(3))
        out = T.batchnorm(x, gamma, beta, np.zeros(3), np.ones(3), training=True)
        assert np.allclose(out.data, 0.0)

    def test_beta_shifts_standardized_input(self):
        rng = np.random.default_rng(0)
        x = tensor(rng.standard_normal((64, 4)))
        gamma, beta = tensor(np.ones(4)), tensor(np.full(4, 5.0))
        out = T.batchnorm(x, gamma, beta, np.zeros(4), np.ones(4), training=True)
        assert np.allclose(out.data.mean(axis=0), 5.0, atol=1e-9)

    def test_gamma_grad_matches_finite_differences(self):
        rng = np.random.default_rng(5)
        x = tensor(rng.standard_normal((8, 4, 3, 3)), grad=False)
        gamma = tensor(rng.standard_normal(4) + 1.0)
        beta = tensor(rng.standard_normal(4), grad=False)
        coeffs = rng.standard_normal((8, 4, 3, 3))

        def forward():
            return T.batchnorm(x, gamma, beta, np.zeros(4), np.ones(4), training=True)

        T.weighted_sum(forward(), coeffs).backward()
        numeric = gradcheck.numeric_gradient(
            lambda: float((forward().data * coeffs).sum()), gamma.data)
        assert gradcheck.max_rel_error(gamma.grad, numeric) < 1e-4

    def test_running_stats_update_and_eval_mode(self):
        rng = np.random.default_rng(6)
        x = tensor(rng.standard_normal((32, 2)) * 3.0 + 1.0)
        gamma, beta = tensor(np.ones(2)), tensor(np.zeros(2))
        rm, rv = np.zeros(2), np.ones(2)
        T.batchnorm(x, gamma, beta, rm, rv, training=True, momentum=0.1)
        assert np.allclose(rm, 0.1 * x.data.mean(axis=0))
        assert np.allclose(rv, 0.9 + 0.1 * x.data.var(axis=0))
        frozen_rm, frozen_rv = rm.copy(), rv.copy()
        out = T.batchnorm(x, gamma, beta, rm, rv, training=False)
        expect = (x.data - frozen_rm) / np.sqrt(frozen_rv + 1e-5)
        assert np.allclose(out.data, expect)
        assert np.array_equal(rm, frozen_rm)  # eval leaves buffers alone

    def test_affine_shape_mismatch(self):
        with pytest.raises(DimensionError):
            T.batchnorm(tensor(np.ones((4, 3))), tensor(np.ones(2)),
                        tensor(np.zeros(2)), np.zeros(3), np.ones(3), training=True)


class TestSoftmaxCrossEntropy:
    def test_uniform_logits(self):
        logits = tensor(np.zeros((3, 4)))
        loss = T.softmax_cross_entropy(logits, np.array([0, 1, 3]))
        assert math.isclose(loss.item(), math.log(4.0), rel_tol=1e-12)

    def test_confident_correct_logit(self):
        logits = np.zeros((1, 5))
        logits[0, 2] = 20.0  # logit gap 20 at the true class
        loss = T.softmax_cross_entropy(tensor(logits), np.array([2]))
        assert loss.item() < 1e-3

    def test_weighted_equals_duplicated_samples(self):
        # Weighting a sample by an integer k must match feeding k copies.
        rng = np.random.default_rng(9)
        logits = rng.standard_normal((3, 4))
        labels = np.array([1, 0, 3])
        weights = np.array([2.0, 1.0, 3.0])
        dup_logits = np.repeat(logits, [2, 1, 3], axis=0)
        dup_labels = np.repeat(labels, [2, 1, 3])

        w_t = tensor(logits)
        weighted = T.softmax_cross_entropy(w_t, labels, weights)
        d_t = tensor(dup_logits)
        duplicated = T.softmax_cross_entropy(d_t, dup_labels)
        assert math.isclose(weighted.item(), duplicated.item(), rel_tol=1e-12)

        weighted.backward()
        duplicated.backward()
        merged = np.add.reduceat(d_t.grad, [0, 2, 3], axis=0)
        assert np.allclose(w_t.grad, merged, atol=1e-12)

    def test_label_out_of_range(self):
        with pytest.raises(InputError):
            T.softmax_cross_entropy(tensor(np.zeros((2, 3))), np.array([0, 3]))


class TestElementwiseOps:
    def test_relu(self):
        out = T.relu(tensor([[-1.0, 0.0, 2.0]]))
        assert np.array_equal(out.data, [[0.0, 0.0, 2.0]])

    def test_maxpool(self):
        out = T.maxpool2d(tensor([[[[1.0, 2.0], [3.0, 4.0]]]]), 2)
        assert out.shape == (1, 1, 1, 1)
        assert out.data[0, 0, 0, 0] == 4.0

    def test_maxpool_indivisible(self):
        with pytest.raises(DimensionError):
            T.maxpool2d(tensor(np.ones((1, 1, 3, 3))), 2)

    def test_flatten_preserves_count(self):
        x = tensor(np.arange(24.0).reshape(2, 3, 2, 2))
        out = T.flatten(x)
        assert out.shape == (2, 12)
        assert out.size == x.size

    def test_add_broadcast_bias(self):
        out = T.add(tensor(np.zeros((2, 3))), tensor([1.0, 2.0, 3.0]))
        assert np.array_equal(out.data, [[1.0, 2.0, 3.0], [1.0, 2.0, 3.0]])

    def test_add_shape_mismatch(self):
        with pytest.raises(DimensionError):
            T.add(tensor(np.ones((2, 3))), tensor(np.ones((4, 5))))


class TestGraphMechanics:
    def test_all_ops_match_finite_differences(self):
        for name, check in gradcheck.CHECKS.items():
            assert check() < gradcheck.FD_TOL, f"{name} fails the gradient check"

    def test_shared_subexpression_accumulates(self):
        # x used twice in one graph == two independent copies, grads summed.
        rng = np.random.default_rng(11)
        data = rng.standard_normal((3, 3))
        coeffs = rng.standard_normal((3, 3))

        x = tensor(data)
        T.weighted_sum(T.matmul(x, x), coeffs).backward()

        xa, xb = tensor(data), tensor(data)
        T.weighted_sum(T.matmul(xa, xb), coeffs).backward()
        assert np.allclose(x.grad, xa.grad + xb.grad, atol=1e-12)

    def test_backward_visits_each_node_once(self):
        # Diamond graph: double-counting would double the gradient.
        x = tensor(np.ones((2, 2)))
        y = T.add(x, x)
        z = T.add(y, y)
        T.weighted_sum(z, np.ones((2, 2))).backward()
        assert np.allclose(x.grad, 4.0)

    def test_forward_deterministic(self):
        rng = np.random.default_rng(12)
        x = tensor(rng.standard_normal((4, 3, 6, 6)), grad=False)
        w = tensor(rng.standard_normal((5, 3, 3, 3)), grad=False)
        a = T.conv2d(x, w, stride=1, padding=1).data
        b = T.conv2d(x, w, stride=1, padding=1).data
        assert np.array_equal(a, b)

    def test_no_grad_blocks_graph(self):
        x = tensor(np.ones((2, 2)))
        with T.no_grad():
            out = T.relu(x)
        assert out._backward is None


class TestDtypeConfig:
    def test_float32_option(self):
        T.set_default_dtype("float32")
        try:
            assert T.Tensor(np.ones(3)).data.dtype == np.float32
        finally:
            T.set_default_dtype("float64")
        assert T.Tensor(np.ones(3)).data.dtype == np.float64

    def test_rejects_other_dtypes(self):
        with pytest.raises(InputError):
            T.set_default_dtype("int32")
