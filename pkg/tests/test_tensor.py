import math

import numpy as np
import pytest

from conftest import gradcheck
from genreplay import tensor as T
from genreplay.errors import ContractError, DegenerateInputError, ShapeError
from genreplay.tensor import SGD, Parameter, Tensor, no_grad


def conv2d_oracle(x, kernel, stride, padding):
    """Direct six-loop convolution, the independent reference for conv2d."""
    n, c_in, h, w = x.shape
    c_out, _, k, _ = kernel.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    out = np.zeros((n, c_out, ho, wo))
    for b in range(n):
        for co in range(c_out):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for ci in range(c_in):
                        for ki in range(k):
                            for kj in range(k):
                                acc += xp[b, ci, i * stride + ki, j * stride + kj] \
                                    * kernel[co, ci, ki, kj]
                    out[b, co, i, j] = acc
    return out


def matmul_oracle(a, b):
    """Triple-loop matrix product."""
    n, k = a.shape
    k2, m = b.shape
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            for p in range(k):
                out[i, j] += a[i, p] * b[p, j]
    return out


def logsumexp_ce_oracle(logits, labels):
    """Cross-entropy via an independent log-sum-exp evaluation."""
    total = 0.0
    for row, lab in zip(logits, labels):
        m = row.max()
        lse = m + math.log(np.exp(row - m).sum())
        total += lse - row[lab]
    return total / len(labels)


class TestConv2d:
    def test_scaling_kernel(self):
        x = Tensor(np.ones((1, 1, 3, 3)))
        k = Tensor(np.full((1, 1, 1, 1), 2.0))
        out = T.conv2d(x, k, stride=1, padding=0)
        np.testing.assert_array_equal(out.data, np.full((1, 1, 3, 3), 2.0))

    def test_identity_kernel(self, rng):
        x = Tensor(rng.normal(size=(2, 3, 6, 6)))
        k = np.zeros((3, 3, 3, 3))
        for c in range(3):
            k[c, c, 1, 1] = 1.0
        out = T.conv2d(x, Tensor(k), stride=1, padding=1)
        np.testing.assert_array_equal(out.data, x.data)

    def test_matches_direct_loop_oracle(self, rng):
        x = rng.normal(size=(1, 2, 4, 4))
        k = rng.normal(size=(3, 2, 3, 3))
        for stride, padding in [(1, 0), (1, 1), (2, 1), (2, 0)]:
            got = T.conv2d(Tensor(x), Tensor(k), stride, padding).data
            want = conv2d_oracle(x, k, stride, padding)
            np.testing.assert_allclose(got, want, atol=1e-9, rtol=0)

    def test_output_shape_rule(self, rng):
        x = Tensor(rng.normal(size=(1, 1, 7, 7)))
        k = Tensor(rng.normal(size=(2, 1, 3, 3)))
        out = T.conv2d(x, k, stride=2, padding=1)
        assert out.shape == (1, 2, 4, 4)  # floor((7+2-3)/2)+1

    def test_channel_mismatch_raises(self, rng):
        x = Tensor(rng.normal(size=(1, 2, 4, 4)))
        k = Tensor(rng.normal(size=(3, 5, 3, 3)))
        with pytest.raises(ShapeError):
            T.conv2d(x, k, 1, 0)

    def test_kernel_larger_than_input_raises(self, rng):
        with pytest.raises(ShapeError):
            T.conv2d(Tensor(rng.normal(size=(1, 1, 2, 2))),
                     Tensor(rng.normal(size=(1, 1, 5, 5))), 1, 0)


class TestRelu:
    def test_examples(self):
        out = T.relu(Tensor(np.array([-1.0, 0.0, 2.0])))
        np.testing.assert_array_equal(out.data, [0.0, 0.0, 2.0])
        out = T.relu(Tensor(np.array([-3.0, -0.5])))
        np.testing.assert_array_equal(out.data, [0.0, 0.0])

    def test_piecewise_gradient(self):
        x = Tensor(np.array([-1.0, 2.0]), requires_grad=True)
        T.backward(T.tsum(T.relu(x)))
        np.testing.assert_array_equal(x.grad, [0.0, 1.0])

    def test_subgradient_zero_at_zero(self):
        x = Tensor(np.array([0.0]), requires_grad=True)
        T.backward(T.tsum(T.relu(x)))
        np.testing.assert_array_equal(x.grad, [0.0])


class TestLinear:
    def test_identity_weight(self, rng):
        x = rng.normal(size=(4, 3))
        out = T.linear(Tensor(x), Tensor(np.eye(3)), Tensor(np.zeros(3)))
        np.testing.assert_array_equal(out.data, x)

    def test_zero_weight_gives_bias_rows(self, rng):
        b = rng.normal(size=5)
        out = T.linear(Tensor(rng.normal(size=(3, 2))), Tensor(np.zeros((5, 2))), Tensor(b))
        for row in out.data:
            np.testing.assert_array_equal(row, b)

    def test_matches_matmul_oracle(self, rng):
        x = rng.normal(size=(2, 3))
        w = rng.normal(size=(4, 3))
        got = T.linear(Tensor(x), Tensor(w)).data
        np.testing.assert_allclose(got, matmul_oracle(x, w.T), atol=1e-9, rtol=0)

    def test_dimension_mismatch(self, rng):
        with pytest.raises(ShapeError):
            T.linear(Tensor(rng.normal(size=(2, 3))), Tensor(rng.normal(size=(4, 5))))


class TestGlobalAvgPool:
    def test_constant_map(self):
        out = T.global_avg_pool(Tensor(np.full((2, 3, 4, 4), 7.5)))
        np.testing.assert_array_equal(out.data, np.full((2, 3), 7.5))

    def test_arithmetic_mean(self):
        h = np.array([[[[1.0, 3.0], [5.0, 7.0]]]])
        out = T.global_avg_pool(Tensor(h))
        np.testing.assert_array_equal(out.data, [[4.0]])

    def test_matches_loop_oracle(self, rng):
        h = rng.normal(size=(2, 3, 2, 2))
        want = np.zeros((2, 3))
        for b in range(2):
            for c in range(3):
                want[b, c] = h[b, c].sum() / 4.0
        np.testing.assert_allclose(T.global_avg_pool(Tensor(h)).data, want, atol=1e-12)


class TestSoftmaxCrossEntropy:
    def test_uniform_logits(self):
        loss = T.softmax_cross_entropy(Tensor(np.zeros((3, 4))), np.array([0, 1, 3]))
        assert loss.item() == pytest.approx(math.log(4.0), abs=1e-12)

    def test_loss_vanishes_as_margin_grows(self):
        prev = None
        for margin in [0.0, 1.0, 5.0, 20.0, 80.0]:
            logits = np.zeros((1, 3))
            logits[0, 1] = margin
            loss = T.softmax_cross_entropy(Tensor(logits), np.array([1])).item()
            if prev is not None:
                assert loss < prev
            prev = loss
        assert prev < 1e-30

    def test_matches_logsumexp_oracle(self, rng):
        logits = rng.normal(size=(5, 7)) * 3.0
        labels = rng.integers(0, 7, size=5)
        got = T.softmax_cross_entropy(Tensor(logits), labels).item()
        assert got == pytest.approx(logsumexp_ce_oracle(logits, labels), abs=1e-9)

    def test_out_of_range_label(self):
        with pytest.raises(IndexError):
            T.softmax_cross_entropy(Tensor(np.zeros((2, 3))), np.array([0, 3]))
        with pytest.raises(IndexError):
            T.softmax_cross_entropy(Tensor(np.zeros((1, 3))), np.array([-1]))


class TestCosineSimilarity:
    def test_identical(self, rng):
        a = rng.normal(size=6)
        assert T.cosine_similarity(Tensor(a), Tensor(a.copy())).item() == pytest.approx(1.0)

    def test_orthogonal(self):
        a = Tensor(np.array([1.0, 0.0]))
        b = Tensor(np.array([0.0, 2.0]))
        assert T.cosine_similarity(a, b).item() == pytest.approx(0.0, abs=1e-15)

    def test_opposite(self, rng):
        a = rng.normal(size=4)
        got = T.cosine_similarity(Tensor(a), Tensor(-a)).item()
        assert got == pytest.approx(-1.0)

    def test_zero_norm_rejected(self):
        with pytest.raises(DegenerateInputError):
            T.cosine_similarity(Tensor(np.zeros(3)), Tensor(np.ones(3)))


class TestBackward:
    def test_sum_gives_ones(self, rng):
        x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        T.backward(T.tsum(x))
        np.testing.assert_array_equal(x.grad, np.ones((3, 4)))

    def test_half_square_norm_gives_x(self, rng):
        data = rng.normal(size=5)
        x = Tensor(data.copy(), requires_grad=True)
        T.backward(T.tsum(x * x) * 0.5)
        np.testing.assert_allclose(x.grad, data, atol=1e-12)

    def test_accumulates_without_reset(self, rng):
        x = Tensor(rng.normal(size=3), requires_grad=True)
        T.backward(T.tsum(x))
        T.backward(T.tsum(x))
        np.testing.assert_array_equal(x.grad, np.full(3, 2.0))

    def test_non_scalar_rejected(self, rng):
        x = Tensor(rng.normal(size=3), requires_grad=True)
        with pytest.raises(ContractError):
            T.backward(x * 2.0)

    def test_diamond_graph_accumulation(self, rng):
        x = Tensor(rng.normal(size=3), requires_grad=True)
        y = x * 2.0
        T.backward(T.tsum(y * y) + T.tsum(y))
        np.testing.assert_allclose(x.grad, 8.0 * x.data + 2.0, atol=1e-12)


class TestSGD:
    def test_plain_step(self):
        p = Parameter("p", Tensor(np.array([1.0])))
        p.tensor.grad = np.array([0.5])
        SGD([p], lr=0.1, momentum=0.0).step()
        np.testing.assert_allclose(p.data, [0.95])
        assert p.tensor.grad is None

    def test_zero_grad_leaves_params(self):
        p = Parameter("p", Tensor(np.array([3.0, -1.0])))
        p.tensor.grad = np.zeros(2)
        SGD([p], lr=0.5, momentum=0.9).step()
        np.testing.assert_array_equal(p.data, [3.0, -1.0])

    def test_two_steps_match_hand_recursion(self):
        p = Parameter("p", Tensor(np.array([2.0])))
        opt = SGD([p], lr=0.1, momentum=0.9)
        # step 1: v = g1, p = 2 - 0.1*g1; step 2: v = 0.9*g1 + g2
        p.tensor.grad = np.array([1.0])
        opt.step()
        np.testing.assert_allclose(p.data, [2.0 - 0.1 * 1.0])
        p.tensor.grad = np.array([0.5])
        opt.step()
        v2 = 0.9 * 1.0 + 0.5
        np.testing.assert_allclose(p.data, [1.9 - 0.1 * v2])

    def test_missing_grad_raises(self):
        p = Parameter("p", Tensor(np.array([1.0])))
        with pytest.raises(ContractError):
            SGD([p], lr=0.1).step()


class TestGradientsAgainstFiniteDifferences:
    """Central-difference checks for every differentiable op, 64-bit."""

    def test_add_sub_mul_div(self, rng):
        a = rng.normal(size=(3, 2))
        b = rng.normal(size=(3, 2)) + 3.0  # keep divisor away from 0
        gradcheck(lambda ts: T.tsum((ts[0] + ts[1]) * ts[0] - ts[0] / ts[1]), [a, b])

    def test_broadcast_ops(self, rng):
        a = rng.normal(size=(3, 4))
        b = rng.normal(size=(1, 4))
        gradcheck(lambda ts: T.tsum(ts[0] * ts[1] + ts[1]), [a, b])

    def test_matmul(self, rng):
        a = rng.normal(size=(3, 4))
        b = rng.normal(size=(4, 2))
        gradcheck(lambda ts: T.tsum(ts[0] @ ts[1] * 0.5), [a, b])

    def test_batched_matmul(self, rng):
        a = rng.normal(size=(2, 3, 4))
        b = rng.normal(size=(2, 4, 3))
        gradcheck(lambda ts: T.tsum(ts[0] @ ts[1]), [a, b])

    def test_relu(self, rng):
        x = rng.normal(size=(4, 4))
        x[np.abs(x) < 1e-3] += 0.1  # keep probes away from the kink
        gradcheck(lambda ts: T.tsum(T.relu(ts[0]) * T.relu(ts[0])), [x])

    def test_reshape_transpose_concat(self, rng):
        a = rng.normal(size=(2, 6))
        b = rng.normal(size=(2, 3))
        gradcheck(
            lambda ts: T.tsum(T.concat([T.reshape(ts[0], (2, 6)),
                                        T.transpose(ts[1], (0, 1))], axis=1)
                              * T.concat([ts[0], ts[1]], axis=1)),
            [a, b],
        )

    def test_conv2d(self, rng):
        x = rng.normal(size=(2, 2, 4, 4))
        k = rng.normal(size=(2, 2, 3, 3))
        for stride, padding in [(1, 1), (2, 1), (1, 0)]:
            gradcheck(
                lambda ts, s=stride, p=padding: T.tsum(
                    T.conv2d(ts[0], ts[1], s, p) * T.conv2d(ts[0], ts[1], s, p)),
                [x, k],
            )

    def test_global_avg_pool(self, rng):
        h = rng.normal(size=(2, 3, 3, 3))
        gradcheck(lambda ts: T.tsum(T.global_avg_pool(ts[0]) * T.global_avg_pool(ts[0])), [h])

    def test_softmax_cross_entropy(self, rng):
        logits = rng.normal(size=(4, 5))
        labels = np.array([0, 2, 4, 1])
        gradcheck(lambda ts: T.softmax_cross_entropy(ts[0], labels), [logits])

    def test_frobenius_norm(self, rng):
        x = rng.normal(size=(3, 4))
        gradcheck(lambda ts: T.frobenius_norm(ts[0]), [x])
        gradcheck(lambda ts: T.tsum(T.frobenius_norm(ts[0], axis=1)), [x])
        y = rng.normal(size=(2, 3, 3))
        gradcheck(lambda ts: T.tsum(T.frobenius_norm(ts[0], axis=(1, 2))), [y])

    def test_cosine_similarity(self, rng):
        a = rng.normal(size=5)
        b = rng.normal(size=5)
        gradcheck(lambda ts: T.cosine_similarity(ts[0], ts[1]), [a, b])

    def test_sum_mean_axes(self, rng):
        x = rng.normal(size=(3, 4))
        gradcheck(lambda ts: T.tsum(T.tsum(ts[0], axis=1) * T.tsum(ts[0], axis=1)), [x])
        gradcheck(lambda ts: T.tmean(ts[0]) * 3.0, [x])


class TestEnginePurityAndFiniteness:
    def test_forward_ops_pure(self, rng):
        x = rng.normal(size=(2, 3, 5, 5))
        k = rng.normal(size=(4, 3, 3, 3))
        first = T.conv2d(Tensor(x), Tensor(k), 2, 1).data
        second = T.conv2d(Tensor(x), Tensor(k), 2, 1).data
        assert first.tobytes() == second.tobytes()

    def test_no_nan_inf_on_finite_inputs(self, rng):
        x = Tensor(rng.normal(size=(2, 2, 4, 4)) * 10)
        k = Tensor(rng.normal(size=(2, 2, 3, 3)) * 10)
        out = T.conv2d(x, k, 1, 1)
        pooled = T.global_avg_pool(T.relu(out))
        loss = T.softmax_cross_entropy(pooled, np.array([0, 1]))
        assert np.isfinite(out.data).all()
        assert np.isfinite(loss.data).all()

    def test_grad_shape_matches_data(self, rng):
        x = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
        T.backward(T.tsum(x * x))
        assert x.grad.shape == x.data.shape

    def test_no_grad_context(self, rng):
        x = Tensor(rng.normal(size=3), requires_grad=True)
        with no_grad():
            y = x * 2.0
        assert not y.requires_grad
        y2 = x * 2.0
        assert y2.requires_grad

    def test_detach_cuts_graph(self, rng):
        x = Tensor(rng.normal(size=3), requires_grad=True)
        y = (x * 2.0).detach()
        assert not y.requires_grad
        z = Tensor(rng.normal(size=3), requires_grad=True)
        T.backward(T.tsum(y * z))
        assert x.grad is None

    def test_dtype_preserved_float32(self, rng):
        x = Tensor(rng.normal(size=(2, 2)).astype(np.float32), requires_grad=True)
        y = T.tsum(T.relu(x) * x)
        assert y.data.dtype == np.float32
        T.backward(y)
        assert x.grad.dtype == np.float32
