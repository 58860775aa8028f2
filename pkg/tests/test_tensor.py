"""Core tensor ops: spec examples plus gradient checks against the
finite-difference oracle."""

import math

import numpy as np
import pytest

from conftest import check_gradient, finite_difference_grad
from mevit.tensor import (
    KernelTooLargeError,
    ShapeMismatchError,
    Tensor,
    affine_norm,
    concat,
    conv2d,
    cross_entropy,
    dropout,
    gelu,
    global_avg_pool,
    l1_loss,
    layer_norm,
    make_rng,
    matmul,
    maxpool2d,
    no_grad,
    softmax,
)


class TestMatmul:
    def test_identity(self):
        m = np.arange(9.0).reshape(3, 3)
        out = matmul(Tensor(np.eye(3)), Tensor(m))
        np.testing.assert_array_equal(out.data, m)

    def test_row_sums(self):
        out = matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[1.0], [1.0]]))
        np.testing.assert_array_equal(out.data, [[3.0], [7.0]])

    def test_shape_mismatch_names_shapes(self):
        with pytest.raises(ShapeMismatchError, match=r"\(2, 3\).*\(2, 3\)"):
            matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))

    def test_grad_vs_finite_differences(self, rng):
        a = rng.normal(size=(3, 4))
        b = Tensor(rng.normal(size=(4, 2)))
        check_gradient(lambda t: matmul(t, b).sum(), a, tol=1e-6)

    def test_grad_right_operand(self, rng):
        a = Tensor(rng.normal(size=(3, 4)))
        b = rng.normal(size=(4, 2))
        check_gradient(lambda t: matmul(a, t).sum(), b, tol=1e-6)

    def test_batched_grad(self, rng):
        a = rng.normal(size=(2, 3, 4))
        w = Tensor(rng.normal(size=(4, 5)))
        weights = Tensor(rng.normal(size=(2, 3, 5)))
        check_gradient(lambda t: (matmul(t, w) * weights).sum(), a)


class TestSoftmax:
    def test_symmetry(self):
        out = softmax(Tensor([0.0, 0.0]), axis=-1)
        np.testing.assert_allclose(out.data, [0.5, 0.5])

    def test_large_inputs_stable(self):
        out = softmax(Tensor([1000.0, 1000.0]), axis=-1)
        np.testing.assert_allclose(out.data, [0.5, 0.5])
        assert np.isfinite(out.data).all()

    def test_closed_form(self):
        out = softmax(Tensor([math.log(1), math.log(2), math.log(3)]), axis=-1)
        np.testing.assert_allclose(out.data, [1 / 6, 2 / 6, 3 / 6], atol=1e-12)

    def test_rows_sum_to_one(self, rng):
        for _ in range(100):
            x = rng.normal(scale=10, size=(4, 7))
            out = softmax(Tensor(x), axis=-1)
            np.testing.assert_allclose(out.data.sum(axis=-1), np.ones(4), atol=1e-9)
            assert (out.data >= 0).all()

    def test_grad(self, rng):
        x = rng.normal(size=(3, 5))
        w = Tensor(rng.normal(size=(3, 5)))
        check_gradient(lambda t: (softmax(t, axis=-1) * w).sum(), x)


class TestGelu:
    def test_zero(self):
        assert gelu(Tensor(0.0)).item() == 0.0

    def test_asymptote(self):
        assert abs(gelu(Tensor(10.0)).item() - 10.0) < 1e-6

    def test_derivative_at_zero(self):
        g = finite_difference_grad(lambda x: gelu(Tensor(x)).item(), np.zeros(1))
        assert abs(g[0] - 0.5) < 1e-6

    def test_grad(self, rng):
        x = rng.normal(size=(4, 3))
        w = Tensor(rng.normal(size=(4, 3)))
        check_gradient(lambda t: (gelu(t) * w).sum(), x)


class TestLayerNorm:
    def test_constant_vector_zeroed(self):
        out = layer_norm(Tensor([3.0, 3.0, 3.0]), Tensor(np.ones(3)), Tensor(np.zeros(3)))
        np.testing.assert_allclose(out.data, np.zeros(3), atol=1e-12)

    def test_zero_gamma_gives_beta(self, rng):
        x = rng.normal(size=(2, 4))
        out = layer_norm(Tensor(x), Tensor(np.zeros(4)), Tensor(np.full(4, 2.5)))
        np.testing.assert_allclose(out.data, np.full((2, 4), 2.5))

    def test_output_statistics(self, rng):
        x = rng.normal(size=(8, 32)) * 3 + 1
        gamma, beta = 1.7, -0.3
        out = layer_norm(Tensor(x), Tensor(np.full(32, gamma)), Tensor(np.full(32, beta)))
        np.testing.assert_allclose(out.data.mean(axis=-1), np.full(8, beta), atol=1e-6)
        np.testing.assert_allclose(out.data.std(axis=-1), np.full(8, abs(gamma)), atol=1e-4)

    def test_grad(self, rng):
        x = rng.normal(size=(3, 6))
        g = Tensor(rng.normal(size=6))
        b = Tensor(rng.normal(size=6))
        w = Tensor(rng.normal(size=(3, 6)))
        check_gradient(lambda t: (layer_norm(t, g, b) * w).sum(), x)


class TestAffineNorm:
    def test_identity(self, rng):
        x = rng.normal(size=(2, 3))
        out = affine_norm(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)))
        np.testing.assert_array_equal(out.data, x)

    def test_zero_alpha_constant(self, rng):
        x = rng.normal(size=(2, 3))
        out = affine_norm(Tensor(x), Tensor(np.zeros(3)), Tensor([1.0, 2.0, 3.0]))
        np.testing.assert_array_equal(out.data, np.tile([1.0, 2.0, 3.0], (2, 1)))

    def test_direct_evaluation(self):
        out = affine_norm(Tensor([1.0, 2.0]), Tensor([2.0, 3.0]), Tensor([1.0, 1.0]))
        np.testing.assert_array_equal(out.data, [3.0, 7.0])

    def test_no_statistics(self, rng):
        # constant shift moves outputs linearly, unlike layer norm
        x = rng.normal(size=(1, 4))
        a, b = Tensor(np.full(4, 2.0)), Tensor(np.zeros(4))
        base = affine_norm(Tensor(x), a, b).data
        shifted = affine_norm(Tensor(x + 1.0), a, b).data
        np.testing.assert_allclose(shifted - base, np.full((1, 4), 2.0))


class TestConv2d:
    def test_one_by_one_identity(self):
        x = np.arange(16.0).reshape(1, 4, 4, 1)
        w = np.ones((1, 1, 1, 1))
        out = conv2d(Tensor(x), Tensor(w))
        np.testing.assert_array_equal(out.data, x)

    def test_all_ones(self):
        x = np.ones((1, 2, 2, 1))
        w = np.ones((2, 2, 1, 1))
        out = conv2d(Tensor(x), Tensor(w))
        np.testing.assert_array_equal(out.data, [[[[4.0]]]])

    def test_kernel_too_large(self):
        with pytest.raises(KernelTooLargeError):
            conv2d(Tensor(np.zeros((1, 2, 2, 1))), Tensor(np.zeros((3, 3, 1, 1))))

    def test_output_extents(self, rng):
        x = Tensor(rng.normal(size=(2, 7, 7, 3)))
        w = Tensor(rng.normal(size=(3, 3, 3, 5)))
        assert conv2d(x, w, stride=2, padding=1).shape == (2, 4, 4, 5)

    def test_grad_input(self, rng):
        x = rng.normal(size=(2, 5, 5, 2))
        w = Tensor(rng.normal(size=(3, 3, 2, 3)))
        b = Tensor(rng.normal(size=3))
        mixer = Tensor(rng.normal(size=(2, 5, 5, 3)))
        check_gradient(lambda t: (conv2d(t, w, b, padding=1) * mixer).sum(), x, tol=1e-5)

    def test_grad_weight(self, rng):
        x = Tensor(rng.normal(size=(2, 4, 4, 2)))
        w = rng.normal(size=(2, 2, 2, 3))
        mixer = Tensor(rng.normal(size=(2, 2, 2, 3)))
        check_gradient(lambda t: (conv2d(x, t, stride=2) * mixer).sum(), w, tol=1e-5)


class TestMaxPool:
    def test_constant_input(self):
        out = maxpool2d(Tensor(np.full((1, 4, 4, 1), 2.0)), 2, 2)
        np.testing.assert_array_equal(out.data, np.full((1, 2, 2, 1), 2.0))

    def test_single_window(self):
        x = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 2, 2, 1)
        assert maxpool2d(Tensor(x), 2).data.item() == 4.0

    def test_tie_break_first_index(self):
        x = Tensor(np.full((1, 2, 2, 1), 5.0), requires_grad=True)
        maxpool2d(x, 2).sum().backward()
        expected = np.zeros((1, 2, 2, 1))
        expected[0, 0, 0, 0] = 1.0
        np.testing.assert_array_equal(x.grad, expected)

    def test_window_exceeds_input(self):
        with pytest.raises(KernelTooLargeError):
            maxpool2d(Tensor(np.zeros((1, 2, 2, 1))), 3)

    def test_grad(self, rng):
        x = rng.normal(size=(2, 6, 6, 3))
        w = Tensor(rng.normal(size=(2, 3, 3, 3)))
        check_gradient(lambda t: (maxpool2d(t, 2, 2) * w).sum(), x)


class TestGlobalAvgPool:
    def test_single_token(self, rng):
        x = rng.normal(size=(1, 1, 4))
        np.testing.assert_allclose(global_avg_pool(Tensor(x)).data, x[:, 0, :])

    def test_two_tokens(self):
        x = np.array([[[1.0, 1.0], [3.0, 3.0]]])
        np.testing.assert_allclose(global_avg_pool(Tensor(x)).data, [[2.0, 2.0]])

    def test_grad_is_inverse_count(self):
        x = Tensor(np.zeros((1, 5, 2)), requires_grad=True)
        global_avg_pool(x).sum().backward()
        np.testing.assert_allclose(x.grad, np.full((1, 5, 2), 0.2))


class TestDropout:
    def test_rate_zero_identity(self, rng):
        x = Tensor(rng.normal(size=(3, 3)))
        assert dropout(x, 0.0, True, make_rng(0)) is x

    def test_inference_identity(self, rng):
        x = Tensor(rng.normal(size=(3, 3)))
        assert dropout(x, 0.9, False) is x

    def test_rate_out_of_range(self):
        with pytest.raises(ValueError):
            dropout(Tensor(np.zeros(3)), 1.0, True, make_rng(0))

    def test_empirical_zero_fraction(self):
        x = Tensor(np.ones(100_000))
        out = dropout(x, 0.5, True, make_rng(7))
        frac = (out.data == 0).mean()
        assert 0.49 <= frac <= 0.51
        survivors = out.data[out.data != 0]
        np.testing.assert_allclose(survivors, 2.0)


class TestCrossEntropy:
    def test_uniform_logits(self):
        k = 7
        loss = cross_entropy(Tensor(np.zeros((3, k))), [0, 3, 6])
        assert abs(loss.item() - math.log(k)) < 1e-12

    def test_confident_correct(self):
        logits = np.zeros((1, 4))
        logits[0, 2] = 100.0
        assert cross_entropy(Tensor(logits), [2]).item() < 1e-12

    def test_label_out_of_range(self):
        with pytest.raises(ValueError, match="label out of range"):
            cross_entropy(Tensor(np.zeros((2, 3))), [0, 3])

    def test_grad(self, rng):
        logits = rng.normal(size=(4, 6))
        labels = rng.integers(0, 6, 4)
        check_gradient(lambda t: cross_entropy(t, labels), logits, tol=1e-6)


class TestL1Loss:
    def test_zero_at_equality(self, rng):
        x = rng.normal(size=5)
        assert l1_loss(Tensor(x), Tensor(x.copy())).item() == 0.0

    def test_simple_value(self):
        assert l1_loss(Tensor([2.0]), Tensor([5.0])).item() == 3.0

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            l1_loss(Tensor(np.zeros(3)), Tensor(np.zeros(4)))

    def test_subgradient_zero_at_tie(self):
        pred = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        l1_loss(pred, Tensor([1.0, 5.0])).backward()
        np.testing.assert_array_equal(pred.grad, [0.0, -0.5])

    def test_grad(self, rng):
        pred = rng.normal(size=(3, 2))
        target = Tensor(rng.normal(size=(3, 2)))
        check_gradient(lambda t: l1_loss(t, target), pred)


class TestTapeAndGraph:
    def test_backward_requires_scalar(self):
        x = Tensor(np.zeros((2, 2)), requires_grad=True)
        with pytest.raises(ValueError):
            (x * 2.0).backward()

    def test_replay_determinism(self, rng):
        x = rng.normal(size=(4, 4))

        def run():
            t = Tensor(x.copy(), requires_grad=True)
            loss = (gelu(matmul(t, Tensor(x.T))) * Tensor(x)).sum()
            loss.backward()
            return loss.item(), t.grad.copy()

        l1, g1 = run()
        l2, g2 = run()
        assert l1 == l2
        np.testing.assert_array_equal(g1, g2)

    def test_shared_node_accumulates(self):
        x = Tensor(np.array([3.0]), requires_grad=True)
        (x * x).sum().backward()
        np.testing.assert_allclose(x.grad, [6.0])

    def test_no_grad_blocks_recording(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with no_grad():
            y = (x * 2.0).sum()
        assert y._backward is None and not y.requires_grad

    def test_concat_roundtrip_grad(self, rng):
        a = rng.normal(size=(2, 3))

        def loss(t):
            joined = concat([t, t * 2.0], axis=1)
            return (joined * Tensor(np.ones((2, 6)))).sum()

        check_gradient(loss, a, tol=1e-6)
